//! Property tests: transition symmetry, conservation, scheduler
//! uniformity, monotone counters and broadcast expectations.

use proptest::prelude::*;

use popmaj::analysis::broadcast_expected_f64;
use popmaj::engine::{self, schedule_pair, Monitor, RunOptions, SchedulerSeed};
use popmaj::fastmajority1::{FastMajority1, Fm1State, Snap};
use popmaj::fastmajority2::{ClockState, FastMajority2, Fm2State, WorkerState};
use popmaj::harness::generous_max_interactions;
use popmaj::majority::{Majority, MajorityState};
use popmaj::protocol::{
    broadcast_delta, BroadcastProtocol, Census, ExtState, Extended, FourState, NodeStatus,
    Opinion, Protocol,
};
use popmaj::InputInstance;
use rand::Rng;

fn opinion() -> impl Strategy<Value = Opinion> {
    prop_oneof![Just(Opinion::A), Just(Opinion::B)]
}

fn token() -> impl Strategy<Value = Option<Opinion>> {
    prop_oneof![Just(None), opinion().prop_map(Some)]
}

fn status() -> impl Strategy<Value = NodeStatus> {
    prop_oneof![
        5 => Just(NodeStatus::Active),
        1 => opinion().prop_map(NodeStatus::Done),
        1 => Just(NodeStatus::Fail),
    ]
}

prop_compose! {
    fn majority_state(n: usize)(
        token in token(),
        phase in 0u8..12,
        frac in 0.0f64..1.0,
        doubled in any::<bool>(),
        meets in 0u8..5,
        status in status(),
    ) -> MajorityState {
        let params = popmaj::majority::MajorityParams::defaults(n);
        MajorityState {
            token,
            phase,
            step: (frac * params.phase_len as f64) as u16,
            doubled,
            stage_meets: meets,
            status,
        }
    }
}

fn snap() -> impl Strategy<Value = Snap> {
    prop_oneof![
        Just(Snap::Unset),
        Just(Snap::Empty),
        Just(Snap::TokA),
        Just(Snap::TokB)
    ]
}

prop_compose! {
    fn fm1_state(n: usize)(
        token in token(),
        epoch in 0u8..6,
        age in 0u8..4,
        frac in 0.0f64..1.0,
        add_phase in 0u8..9,
        doubled in any::<bool>(),
        oos in any::<bool>(),
        additional in any::<bool>(),
        meets in 0u8..5,
        status in status(),
        snaps in [snap(), snap(), snap()],
    ) -> Fm1State {
        let params = popmaj::fastmajority1::Fm1Params::defaults(n);
        let oos = oos && token.is_some() && !additional;
        Fm1State {
            token,
            heavy: false,
            epoch,
            age,
            step: (frac * params.epoch_len as f64) as u16,
            add_phase,
            doubled,
            out_of_sync: oos,
            additional,
            stage_meets: meets,
            status,
            snaps,
        }
    }
}

prop_compose! {
    fn fm2_state(n: usize)(
        kind in 0u8..4,
        op in opinion(),
        token in token(),
        heavy in any::<bool>(),
        epoch in 0u8..6,
        age in 0u8..4,
        bucket in 0u8..30,
        frac in 0.0f64..1.0,
        oos in any::<bool>(),
        additional in any::<bool>(),
        status in status(),
        snaps in [snap(), snap(), snap()],
    ) -> Fm2State {
        let params = popmaj::fastmajority2::Fm2Params::defaults(n);
        match kind {
            0 => Fm2State::Unassigned(op),
            1 => Fm2State::Clock(ClockState {
                step: (frac * params.inner.epoch_len as f64) as u16,
                status,
            }),
            _ => {
                let heavy = heavy && token.is_some();
                Fm2State::Worker(WorkerState {
                    token,
                    heavy,
                    epoch,
                    age,
                    bucket,
                    doubled: false,
                    out_of_sync: oos && token.is_some(),
                    additional,
                    stage_meets: 0,
                    status,
                    snaps,
                })
            }
        }
    }
}

const SYM_N: usize = 1 << 10;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    /// delta(q'', q') is the swap of delta(q', q'') for the majority
    /// protocol.
    #[test]
    fn majority_delta_symmetric(a in majority_state(SYM_N), b in majority_state(SYM_N)) {
        let inst = InputInstance::new(SYM_N, SYM_N / 2 + 1).unwrap();
        let p = Majority::with_defaults(inst);
        use popmaj::protocol::FastProtocol;
        let (mut a1, mut b1) = (a, b);
        p.apply(&mut a1, &mut b1);
        let (mut b2, mut a2) = (b, a);
        p.apply(&mut b2, &mut a2);
        prop_assert_eq!((a1, b1), (a2, b2));
    }

    #[test]
    fn fm1_delta_symmetric(a in fm1_state(SYM_N), b in fm1_state(SYM_N)) {
        let inst = InputInstance::new(SYM_N, SYM_N / 2 + 1).unwrap();
        let p = FastMajority1::with_defaults(inst);
        use popmaj::protocol::FastProtocol;
        let (mut a1, mut b1) = (a, b);
        p.apply(&mut a1, &mut b1);
        let (mut b2, mut a2) = (b, a);
        p.apply(&mut b2, &mut a2);
        prop_assert_eq!((a1, b1), (a2, b2));
    }

    /// All FastMajority2 transitions are order-invariant except the
    /// declared initialization rule on two unassigned nodes.
    #[test]
    fn fm2_delta_symmetric_outside_init(a in fm2_state(SYM_N), b in fm2_state(SYM_N)) {
        prop_assume!(!matches!(
            (&a, &b),
            (Fm2State::Unassigned(_), Fm2State::Unassigned(_))
        ));
        let inst = InputInstance::new(SYM_N, SYM_N / 2 + 1).unwrap();
        let p = FastMajority2::with_defaults(inst);
        use popmaj::protocol::FastProtocol;
        let (mut a1, mut b1) = (a, b);
        p.apply(&mut a1, &mut b1);
        let (mut b2, mut a2) = (b, a);
        p.apply(&mut b2, &mut a2);
        prop_assert_eq!((a1, b1), (a2, b2));
    }

    #[test]
    fn broadcast_delta_table(a in any::<bool>(), b in any::<bool>()) {
        let (x, y) = broadcast_delta(a, b);
        prop_assert_eq!(x, y);
        prop_assert_eq!(x, a || b);
    }
}

#[test]
fn fm2_init_rule_is_the_declared_asymmetric_case() {
    let inst = InputInstance::new(64, 33).unwrap();
    let p = FastMajority2::with_defaults(inst);
    use popmaj::protocol::FastProtocol;
    let a = Fm2State::Unassigned(Opinion::A);
    let b = Fm2State::Unassigned(Opinion::B);
    let (mut a1, mut b1) = (a, b);
    p.apply(&mut a1, &mut b1);
    let (mut b2, mut a2) = (b, a);
    p.apply(&mut b2, &mut a2);
    // The initiator becomes the clock in both orders, so swapping the
    // order swaps which node ends up as the clock.
    assert!(matches!(a1, Fm2State::Clock(_)));
    assert!(matches!(b2, Fm2State::Clock(_)));
    assert_ne!((a1, b1), (a2, b2));
}

/// Empirical pair distribution of the scheduler passes a chi-square
/// goodness-of-fit test at n = 4 and n = 16 (ordered pairs, so uniformity
/// of both the unordered pair and the orientation is covered).
#[test]
fn scheduler_uniformity_chi_square() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    for (n, draws) in [(4usize, 1_000_000u64), (16, 2_000_000)] {
        let mut rng = SchedulerSeed(20240 + ix_seed(n)).rng();
        let cells = n * (n - 1);
        let mut counts = vec![0u64; n * n];
        for _ in 0..draws {
            let (i, j) = schedule_pair(&mut rng, n);
            counts[i * n + j] += 1;
        }
        let expected = draws as f64 / cells as f64;
        let mut chi2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    assert_eq!(counts[i * n + j], 0);
                    continue;
                }
                let d = counts[i * n + j] as f64 - expected;
                chi2 += d * d / expected;
            }
        }
        let dist = ChiSquared::new((cells - 1) as f64).unwrap();
        let p_value = 1.0 - dist.cdf(chi2);
        assert!(
            p_value > 0.001,
            "n={n}: chi2={chi2:.1} p={p_value:.5} under uniformity"
        );
        // Frequencies within 0.01 of the uniform law for the n=4 case.
        if n == 4 {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let unordered = (counts[i * n + j] + counts[j * n + i]) as f64
                            / draws as f64;
                        assert!((unordered - 1.0 / 6.0).abs() < 0.01);
                    }
                }
            }
        }
    }
}

// Not a seed-derived constant, just distinct fixed seeds per n.
fn ix_seed(n: usize) -> u64 {
    n as u64
}

/// Per-node counters never move backwards (jump-ups only move forward).
struct MonotoneTime {
    times: Vec<u32>,
    params: popmaj::fastmajority1::Fm1Params,
}

impl Monitor<Extended<FastMajority1>> for MonotoneTime {
    fn on_interaction(
        &mut self,
        _t: u64,
        pair: (usize, usize),
        states: &[ExtState<Fm1State>],
        _census: &Census,
        _p: &Extended<FastMajority1>,
    ) {
        for idx in [pair.0, pair.1] {
            let s = &states[idx].fast;
            if s.status == NodeStatus::Active && !s.additional {
                let t = s.time(&self.params);
                assert!(
                    t >= self.times[idx],
                    "node {idx} moved backwards: {} -> {t}",
                    self.times[idx]
                );
                self.times[idx] = t;
            }
        }
    }
}

#[test]
fn fm1_time_counters_are_monotone() {
    let n = 128;
    let inst = InputInstance::new(n, n / 2 + 1).unwrap();
    let params = popmaj::fastmajority1::Fm1Params::defaults(n);
    let p = Extended::new(FastMajority1::new(inst, params.clone()));
    let mut mon = MonotoneTime {
        times: vec![0; n],
        params,
    };
    let opts = RunOptions::for_population(n).with_max(generous_max_interactions(n));
    engine::run_with_monitor(&p, SchedulerSeed(42), &opts, &mut mon);
}

/// Age bounds: 0 <= age_in_epoch <= P, and out-of-sync implies a token.
struct AgeBounds {
    phases: u32,
}

impl Monitor<Extended<FastMajority1>> for AgeBounds {
    fn on_interaction(
        &mut self,
        t: u64,
        pair: (usize, usize),
        states: &[ExtState<Fm1State>],
        _census: &Census,
        _p: &Extended<FastMajority1>,
    ) {
        for idx in [pair.0, pair.1] {
            let s = &states[idx].fast;
            if !s.additional {
                assert!((s.age as u32) <= self.phases, "t={t}");
            }
            if s.out_of_sync {
                assert!(s.token.is_some(), "out-of-sync implies a token, t={t}");
            }
        }
    }
}

#[test]
fn fm1_age_bounds_and_oos_token_invariant() {
    let n = 256;
    let inst = InputInstance::new(n, n / 2 + 1).unwrap();
    let params = popmaj::fastmajority1::Fm1Params::defaults(n);
    let p = Extended::new(FastMajority1::new(inst, params.clone()));
    let mut mon = AgeBounds {
        phases: params.phases,
    };
    let opts = RunOptions::for_population(n).with_max(generous_max_interactions(n));
    engine::run_with_monitor(&p, SchedulerSeed(9), &opts, &mut mon);
}

/// Roles never revert: unassigned counts only fall, clocks stay clocks,
/// workers stay workers.
struct RoleMonotone {
    roles: Vec<u8>,
}

impl Monitor<Extended<FastMajority2>> for RoleMonotone {
    fn on_interaction(
        &mut self,
        t: u64,
        pair: (usize, usize),
        states: &[ExtState<Fm2State>],
        _census: &Census,
        _p: &Extended<FastMajority2>,
    ) {
        for idx in [pair.0, pair.1] {
            let role = match states[idx].fast {
                Fm2State::Unassigned(_) => 0,
                Fm2State::Clock(_) => 1,
                Fm2State::Worker(_) => 2,
            };
            let prev = self.roles[idx];
            assert!(
                prev == 0 || role == prev,
                "node {idx} changed role {prev} -> {role} at t={t}"
            );
            self.roles[idx] = role;
        }
    }
}

#[test]
fn fm2_roles_are_monotone() {
    let n = 256;
    let inst = InputInstance::new(n, n / 2 + 1).unwrap();
    let p = Extended::new(FastMajority2::with_defaults(inst));
    let mut mon = RoleMonotone { roles: vec![0; n] };
    let opts = RunOptions::for_population(n).with_max(generous_max_interactions(n));
    engine::run_with_monitor(&p, SchedulerSeed(77), &opts, &mut mon);
}

#[test]
fn fm2_clock_fraction_after_initialization() {
    // Theta(n) nodes in each set: clock share settles around a quarter.
    let n = 1 << 12;
    let inst = InputInstance::new(n, n / 2 + 2).unwrap();
    let p = Extended::new(FastMajority2::with_defaults(inst));
    // Run long enough for every node to have interacted at least once.
    let opts = RunOptions::for_population(n).with_max(16 * n as u64);
    let r = engine::run(&p, SchedulerSeed(5), &opts);
    let mut unassigned = 0usize;
    let mut clocks = 0usize;
    for s in &r.final_config {
        match s.fast {
            Fm2State::Unassigned(_) => unassigned += 1,
            Fm2State::Clock(_) => clocks += 1,
            Fm2State::Worker(_) => {}
        }
    }
    assert_eq!(unassigned, 0, "initialization completes quickly");
    let frac = clocks as f64 / n as f64;
    assert!(
        (0.2..=0.45).contains(&frac),
        "clock fraction {frac} outside [0.2, 0.45]"
    );
}

#[test]
fn broadcast_completion_matches_closed_form() {
    // n=3: closed form 3.0; simulate.
    let p = BroadcastProtocol::new(3, 1);
    let opts = RunOptions {
        max_interactions: u64::MAX,
        record_trace: false,
        audit_states: false,
        check_conservation: false,
    };
    let runs = 60_000u64;
    let mut total = 0u64;
    for s in 0..runs {
        let r = engine::run(&p, SchedulerSeed(s), &opts);
        total += r.metrics.stabilization_interactions.unwrap();
    }
    let mean = total as f64 / runs as f64;
    assert!((mean - 3.0).abs() < 0.05, "mean {mean}");
    // n=2 is always exactly one interaction.
    let p2 = BroadcastProtocol::new(2, 1);
    for s in 0..50 {
        let r = engine::run(&p2, SchedulerSeed(s), &opts);
        assert_eq!(r.metrics.stabilization_interactions, Some(1));
    }
    // Closed form at a larger size against the simulation mean.
    let n = 1 << 10;
    let expect = broadcast_expected_f64(n);
    let p10 = BroadcastProtocol::new(n, 1);
    let mut total = 0u64;
    for s in 0..300u64 {
        let r = engine::run(&p10, SchedulerSeed(s), &opts);
        total += r.metrics.stabilization_interactions.unwrap();
    }
    let mean = total as f64 / 300.0;
    assert!(
        (mean - expect).abs() / expect < 0.05,
        "mean {mean} vs {expect}"
    );
}

#[test]
fn tc_never_exceeds_ts() {
    for n in [33usize, 64, 128] {
        let inst = InputInstance::new(n, n / 2 + 1).unwrap();
        let p = Extended::new(Majority::with_defaults(inst));
        for seed in 0..10u64 {
            let opts = RunOptions::for_population(n).with_max(generous_max_interactions(n));
            let m = engine::run(&p, SchedulerSeed(seed), &opts).metrics;
            if let (Some(tc), Some(ts)) =
                (m.convergence_interactions, m.stabilization_interactions)
            {
                assert!(tc <= ts, "n={n} seed={seed}: tc={tc} > ts={ts}");
            }
        }
    }
}

/// Conservation with exact arithmetic on a protocol-by-protocol fuzz.
#[test]
fn conservation_holds_until_scope_ends() {
    let mut any_checked = 0;
    for n in [32usize, 65, 128] {
        for seed in 0..6u64 {
            let inst = InputInstance::new(n, n / 2 + 1).unwrap();
            let opts = RunOptions::for_population(n).with_max(generous_max_interactions(n));
            let m1 = engine::run(
                &Extended::new(Majority::with_defaults(inst)),
                SchedulerSeed(seed),
                &opts,
            )
            .metrics;
            assert!(m1.conservation_violation.is_none());
            let m2 = engine::run(
                &Extended::new(FastMajority1::with_defaults(inst)),
                SchedulerSeed(seed),
                &opts,
            )
            .metrics;
            assert!(m2.conservation_violation.is_none());
            let m3 = engine::run(
                &Extended::new(FastMajority2::with_defaults(inst)),
                SchedulerSeed(seed),
                &opts,
            )
            .metrics;
            assert!(m3.conservation_violation.is_none());
            any_checked += 3;
        }
    }
    assert!(any_checked > 0);
}

/// Scheduler determinism seen through a protocol: same seed, same draw
/// sequence, independent of the protocol running on top.
#[test]
fn scheduler_stream_is_protocol_independent() {
    let n = 64;
    let mut r1 = SchedulerSeed(4242).rng();
    let mut r2 = SchedulerSeed(4242).rng();
    for _ in 0..10_000 {
        assert_eq!(schedule_pair(&mut r1, n), schedule_pair(&mut r2, n));
    }
    let _ = r1.gen_range(0..7usize);
}
