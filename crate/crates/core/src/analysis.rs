//! Empirical invariant monitors, the critical-phase calculator, exact
//! small-population Markov oracles, and the distinct-state auditor.
//!
//! The monitors evaluate the invariant thresholds as written, with the
//! protocol's P and lambda substitutions, and report pass rates with
//! margins instead of asserting: desk-scale constants differ from proof
//! constants. The concentration check has its own default constants
//! (`ConcentrationParams`), larger than the protocol defaults, because the
//! check is about the scheduler, not the protocol, and its thresholds
//! assume a sufficiently large window constant.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::engine::{lambda, Monitor};
use crate::fastmajority1::{Fm1Params, Fm1State, FastMajority1};
use crate::protocol::{Census, ExtState, Extended, NodeStatus, Protocol};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("critical phase undefined for a tied input (a0 = b0)")]
    TiedInput,
    #[error("counts-based chain is only tractable for n <= {limit}, got {n}")]
    PopulationTooLarge { n: usize, limit: usize },
}

// ---------------------------------------------------------------------------
// Critical phase
// ---------------------------------------------------------------------------

/// The critical phase and where it lands in the epoch geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CriticalPhase {
    pub p_c: u32,
    pub epoch: u32,
    pub phase_in_epoch: u32,
}

/// Smallest p >= 0 with 2^p * |a0 - b0| > n/3, plus its position in the
/// epoch ladder (P = ceil(lambda^(1/3)) phases per epoch).
pub fn critical_phase(n: usize, a0: usize, b0: usize) -> Result<CriticalPhase, AnalysisError> {
    if a0 == b0 {
        return Err(AnalysisError::TiedInput);
    }
    let delta = a0.abs_diff(b0) as u128;
    let n128 = n as u128;
    let mut p = 0u32;
    while 3 * (delta << p) <= n128 {
        p += 1;
    }
    let lam = lambda(n);
    let phases = {
        let mut q = 1u32;
        while q * q * q < lam {
            q += 1;
        }
        q
    };
    Ok(CriticalPhase {
        p_c: p,
        epoch: p / phases,
        phase_in_epoch: p % phases,
    })
}

// ---------------------------------------------------------------------------
// Invariant reports
// ---------------------------------------------------------------------------

/// Outcome of one invariant check over a configuration snapshot: a pure
/// function of the snapshot, serialized as a JSON record.
#[derive(Debug, Clone, Serialize)]
pub struct InvariantReport {
    pub invariant: String,
    pub step: u64,
    pub pass: bool,
    pub measured: BTreeMap<String, f64>,
    pub thresholds: BTreeMap<String, f64>,
}

impl InvariantReport {
    fn new(invariant: impl Into<String>, step: u64) -> InvariantReport {
        InvariantReport {
            invariant: invariant.into(),
            step,
            pass: true,
            measured: BTreeMap::new(),
            thresholds: BTreeMap::new(),
        }
    }

    fn measure(&mut self, key: &str, v: f64) {
        self.measured.insert(key.to_string(), v);
    }

    fn threshold(&mut self, key: &str, v: f64) {
        self.thresholds.insert(key.to_string(), v);
    }
}

fn is_normal(s: &Fm1State) -> bool {
    s.status == NodeStatus::Active && !s.out_of_sync && !s.additional
}

/// Checks the regular-configuration condition at the beginning of epoch
/// `j`: almost all nodes are normal, in epoch j, with fresh step counters;
/// every straggler is either finishing epoch j-1 or barely into epoch j.
pub fn check_epoch_invariant<'a, I>(states: I, j: u8, p: &Fm1Params, t: u64) -> InvariantReport
where
    I: IntoIterator<Item = &'a Fm1State>,
{
    let mut report = InvariantReport::new(format!("epoch-invariant({j})"), t);
    let step_cap = (p.small_c * p.phases as f64).floor() as u32;
    let late_floor = 3 * p.epoch_len / 4;
    let early_cap = (4.0 * p.small_c * p.lambda as f64).floor() as u32;

    let mut n = 0u64;
    let mut in_window = 0u64;
    let mut straggler_ok = 0u64;
    let mut straggler_bad = 0u64;
    let mut worst_step = 0u32;

    for s in states {
        n += 1;
        let step = s.step as u32;
        if is_normal(s) && s.epoch == j && step <= step_cap {
            in_window += 1;
            continue;
        }
        let clause_2a = is_normal(s) && j > 0 && s.epoch == j - 1 && step >= late_floor;
        let clause_2b = s.status == NodeStatus::Active
            && !s.additional
            && s.epoch == j
            && step <= early_cap;
        if clause_2a || clause_2b {
            straggler_ok += 1;
        } else {
            straggler_bad += 1;
            if s.epoch == j {
                worst_step = worst_step.max(step);
            }
        }
    }

    let needed = n - (n >> (3 * p.phases).min(63));
    report.measure("population", n as f64);
    report.measure("in_window", in_window as f64);
    report.measure("stragglers_ok", straggler_ok as f64);
    report.measure("stragglers_bad", straggler_bad as f64);
    report.measure("worst_step", worst_step as f64);
    report.threshold("in_window_needed", needed as f64);
    report.threshold("step_cap", step_cap as f64);
    report.threshold("late_floor", late_floor as f64);
    report.threshold("early_cap", early_cap as f64);
    report.pass = in_window >= needed && straggler_bad == 0;
    report
}

/// Checks the regular-configuration condition at the beginning of phase `i`
/// of epoch `j` (`i = P` refers to the beginning of the second epoch part):
/// the bulk W sits in the beginning part of the phase, and the total token
/// value of the complement U, relative to the end of epoch j, stays small.
pub fn check_phase_invariant1<'a, I>(
    states: I,
    j: u8,
    i: u32,
    p: &Fm1Params,
    t: u64,
) -> InvariantReport
where
    I: IntoIterator<Item = &'a Fm1State>,
{
    let mut report = InvariantReport::new(format!("phase-invariant1({j},{i})"), t);
    debug_assert!(i <= p.phases);
    let phase_start = if i < p.phases {
        p.phase_bounds[i as usize]
    } else {
        p.first_part_len
    };
    let phase_len = p.phase_bounds[1] - p.phase_bounds[0];
    // Beginning part of a phase: the first c/C fraction of its steps.
    let beg_len = (phase_len as f64 * p.small_c / p.big_c).floor() as u32;
    let late_floor = 3 * p.epoch_len / 4;
    let early_band = (4.0 * p.small_c * p.lambda as f64).floor() as u32;
    let fast_node_phase_cap = (p.small_c / p.big_c * p.phases as f64).floor() as u32;

    let mut n = 0u64;
    let mut w_count = 0u64;
    let mut u_ok = 0u64;
    let mut u_bad = 0u64;
    // Stray value of U, scaled: a token of global age g counts
    // 2^((j+1)P - g) relative to the end of epoch j.
    let mut stray: u128 = 0;
    let end_age = (j as u32 + 1) * p.phases;

    for s in states {
        n += 1;
        let step = s.step as u32;
        let in_w = is_normal(s)
            && s.epoch == j
            && step >= phase_start
            && step - phase_start <= beg_len;
        if in_w {
            w_count += 1;
            continue;
        }
        if s.token.is_some() && !s.additional {
            let g = s.global_age(p);
            let rel = end_age.saturating_sub(g);
            stray += (1u128 << rel) * if s.heavy { 2 } else { 1 };
        }
        let clause_2a = is_normal(s)
            && j > 0
            && s.epoch == j - 1
            && step >= late_floor
            && i < fast_node_phase_cap;
        let clause_2b = s.status == NodeStatus::Active
            && !s.additional
            && s.epoch == j
            && step.abs_diff(phase_start) <= early_band;
        if clause_2a || clause_2b {
            u_ok += 1;
        } else {
            u_bad += 1;
        }
    }

    let w_needed = n.saturating_sub((n * (i as u64 + 1)) >> (2 * p.phases).min(63));
    // Clause 2b of the phase invariant: stray <= n(i+1)/2^(2P).
    let stray_bound_num = n as u128 * (i as u128 + 1);
    let stray_scaled = stray << (2 * p.phases).min(63);
    report.measure("population", n as f64);
    report.measure("w_count", w_count as f64);
    report.measure("u_ok", u_ok as f64);
    report.measure("u_bad", u_bad as f64);
    report.measure("stray_value_rel_epoch_end", stray as f64);
    report.threshold("w_needed", w_needed as f64);
    report.threshold(
        "stray_bound_rel_epoch_end",
        stray_bound_num as f64 / (1u64 << (2 * p.phases).min(63)) as f64,
    );
    report.pass = w_count >= w_needed && stray_scaled <= stray_bound_num && u_bad == 0;
    report
}

/// Per-node interaction-count concentration over a window of `t`
/// interactions: the maximum deviation from the expected 2t/n against
/// c*lambda.
pub fn check_concentration(
    counts: &[u64],
    t: u64,
    small_c: f64,
    lam: u32,
    step: u64,
) -> InvariantReport {
    let mut report = InvariantReport::new("concentration", step);
    let n = counts.len() as f64;
    let expected = 2.0 * t as f64 / n;
    let mut worst = 0.0f64;
    for &c in counts {
        let dev = (c as f64 - expected).abs();
        if dev > worst {
            worst = dev;
        }
    }
    let bound = small_c * lam as f64;
    report.measure("max_deviation", worst);
    report.measure("expected_per_node", expected);
    report.threshold("deviation_bound", bound);
    report.pass = worst <= bound;
    report
}

// ---------------------------------------------------------------------------
// Engine monitors
// ---------------------------------------------------------------------------

/// Window constants for the concentration check. The check is a statement
/// about the uniform scheduler; its constant must be large enough for the
/// c*lambda bound to clear the binomial fluctuations of a full window, so
/// it defaults higher than the protocol constants.
#[derive(Debug, Clone, Copy)]
pub struct ConcentrationParams {
    pub big_c: f64,
    pub small_c: f64,
}

impl Default for ConcentrationParams {
    fn default() -> Self {
        let big_c = 96.0;
        ConcentrationParams {
            big_c,
            small_c: big_c.powf(0.75),
        }
    }
}

impl ConcentrationParams {
    pub fn window_len(&self, n: usize) -> u64 {
        (2.0 * self.big_c * n as f64 * lambda(n) as f64) as u64
    }
}

/// Records per-node interaction counts over consecutive windows and emits
/// one concentration report per completed window.
pub struct ConcentrationMonitor {
    params: ConcentrationParams,
    lam: u32,
    counts: Vec<u64>,
    window_len: u64,
    window_start: u64,
    pub reports: Vec<InvariantReport>,
}

impl ConcentrationMonitor {
    pub fn new(n: usize, params: ConcentrationParams) -> ConcentrationMonitor {
        ConcentrationMonitor {
            params,
            lam: lambda(n),
            counts: vec![0; n],
            window_len: params.window_len(n),
            window_start: 0,
            reports: Vec::new(),
        }
    }
}

impl<P: Protocol> Monitor<P> for ConcentrationMonitor {
    fn on_interaction(&mut self, t: u64, pair: (usize, usize), _: &[P::State], _: &Census, _: &P) {
        self.counts[pair.0] += 1;
        self.counts[pair.1] += 1;
        if t - self.window_start == self.window_len {
            self.reports.push(check_concentration(
                &self.counts,
                self.window_len,
                self.params.small_c,
                self.lam,
                t,
            ));
            self.counts.iter_mut().for_each(|c| *c = 0);
            self.window_start = t;
        }
    }
}

/// Samples the epoch invariant at the start of each epoch: the first
/// interaction at which all but n/2^(3P) nodes have reached epoch j.
/// Sampling stops once any node failed or triggered the additional epoch.
pub struct EpochInvariantMonitor {
    params: Fm1Params,
    next_j: u8,
    pub reports: Vec<InvariantReport>,
}

impl EpochInvariantMonitor {
    pub fn new(params: Fm1Params) -> EpochInvariantMonitor {
        EpochInvariantMonitor {
            params,
            next_j: 0,
            reports: Vec::new(),
        }
    }
}

impl Monitor<Extended<FastMajority1>> for EpochInvariantMonitor {
    fn on_interaction(
        &mut self,
        t: u64,
        _: (usize, usize),
        states: &[ExtState<Fm1State>],
        census: &Census,
        _: &Extended<FastMajority1>,
    ) {
        if self.next_j >= self.params.e_max || census.additional_epoch > 0 || census.fail > 0 {
            return;
        }
        let n = census.population as u64;
        let below: u64 = census.by_epoch[..self.next_j as usize]
            .iter()
            .map(|&c| c as u64)
            .sum();
        let reached = n - below;
        let needed = n - (n >> (3 * self.params.phases).min(63));
        if reached >= needed {
            self.reports.push(check_epoch_invariant(
                states.iter().map(|s| &s.fast),
                self.next_j,
                &self.params,
                t,
            ));
            self.next_j += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Broadcast expectation
// ---------------------------------------------------------------------------

/// Exact expected interactions for a single-source epidemic broadcast under
/// the uniform pairwise scheduler: (n-1) * H_{n-1}.
pub fn broadcast_expected(n: usize) -> BigRational {
    assert!(n >= 2);
    let mut sum = BigRational::zero();
    let m = BigInt::from(n - 1);
    for k in 1..n {
        sum += BigRational::new(m.clone(), BigInt::from(k));
    }
    sum
}

pub fn broadcast_expected_f64(n: usize) -> f64 {
    (1..n).map(|k| (n - 1) as f64 / k as f64).sum()
}

// ---------------------------------------------------------------------------
// Exact absorption oracle for the 4-state protocol
// ---------------------------------------------------------------------------

pub const ORACLE_MAX_N: usize = 8;

/// Exact expected absorption time of the 4-state protocol on the
/// counts-based chain, solved level by level with rational arithmetic.
/// Built from the transition table directly, independent of the
/// simulator's code path.
#[derive(Debug, Clone)]
pub struct MarkovOracleResult {
    pub n: usize,
    pub a0: usize,
    /// Expected interactions to reach a unanimous-output configuration.
    pub expected: BigRational,
    pub expected_f64: f64,
    pub transient_states: usize,
    /// Description of the absorbing set.
    pub absorbing: String,
}

/// Solves the exact linear system for the expected number of interactions
/// until all outputs agree, starting from a0 strong A and n-a0 strong B.
///
/// States are counts (#A, #B, #a, #b). Interactions preserve #A - #B, so
/// the chain decomposes into levels of fixed (#A, #B) connected by
/// cancellations; each level is a birth-death chain in #a solved exactly by
/// tridiagonal elimination.
pub fn four_state_markov_oracle(n: usize, a0: usize) -> Result<MarkovOracleResult, AnalysisError> {
    if n > ORACLE_MAX_N {
        return Err(AnalysisError::PopulationTooLarge {
            n,
            limit: ORACLE_MAX_N,
        });
    }
    let b0 = n - a0;
    if a0 == b0 {
        return Err(AnalysisError::TiedInput);
    }
    // The protocol is symmetric in A and B.
    let (maj, min) = if a0 > b0 { (a0, b0) } else { (b0, a0) };
    let d = maj - min;

    let total_pairs = BigRational::from(BigInt::from(n * (n - 1) / 2));
    let big = |x: usize| BigRational::from(BigInt::from(x));

    let mut transient = 0usize;
    // levels[bb][a] = expected absorption time from (A = bb + d, B = bb,
    // a, b = r - a).
    let mut prev_level: Vec<BigRational> = Vec::new();
    for bb in 0..=min {
        let aa = bb + d;
        let r = n - aa - bb;
        let mut level = vec![BigRational::zero(); r + 1];
        if bb == 0 {
            // No strong B left: the only moves convert weak b one at a
            // time; absorbing at a == r.
            for a in (0..r).rev() {
                let b = r - a;
                let w = big(aa * b);
                level[a] = (&total_pairs + &w * &level[a + 1]) / w;
                transient += 1;
            }
        } else {
            // Tridiagonal system E(a) = [T + AB*E_dn(a+1) + Ab*E(a+1)
            // + Ba*E(a-1)] / (AB + Ab + Ba).
            let cancel_w = big(aa * bb);
            let mut alpha = vec![BigRational::zero(); r + 1];
            let mut beta = vec![BigRational::zero(); r + 1];
            for a in 0..=r {
                let b = r - a;
                let up = big(aa * b);
                let down = big(bb * a);
                let diag = &cancel_w + &up + &down;
                let rhs = &total_pairs + &cancel_w * &prev_level[a + 1];
                let denom = if a == 0 {
                    diag.clone()
                } else {
                    &diag - &down * &beta[a - 1]
                };
                assert!(!denom.is_zero());
                alpha[a] = if a == 0 {
                    &rhs / &denom
                } else {
                    (&rhs + &down * &alpha[a - 1]) / &denom
                };
                beta[a] = &up / &denom;
                transient += 1;
            }
            level[r] = alpha[r].clone();
            for a in (0..r).rev() {
                level[a] = &alpha[a] + &beta[a] * &level[a + 1];
            }
        }
        prev_level = level;
    }

    let expected = prev_level[0].clone();
    let expected_f64 = expected.to_f64().unwrap_or(f64::NAN);
    Ok(MarkovOracleResult {
        n,
        a0,
        expected,
        expected_f64,
        transient_states: transient,
        absorbing: "unanimous-output configurations (no strong or weak minority state left)"
            .to_string(),
    })
}

// ---------------------------------------------------------------------------
// Distinct-state audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AuditRatio {
    pub n_lo: usize,
    pub n_hi: usize,
    pub measured: f64,
    /// Growth ratio a state count proportional to lambda would show.
    pub lambda_ratio: f64,
    /// Growth ratio a state count proportional to lambda^2 would show.
    pub lambda_sq_ratio: f64,
}

/// Consecutive growth ratios of observed distinct-state counts against the
/// ratios implied by lambda and lambda^2 growth.
pub fn audit_ratios(points: &[(usize, u64)]) -> Vec<AuditRatio> {
    points
        .windows(2)
        .map(|w| {
            let (n_lo, c_lo) = w[0];
            let (n_hi, c_hi) = w[1];
            let l_lo = lambda(n_lo) as f64;
            let l_hi = lambda(n_hi) as f64;
            AuditRatio {
                n_lo,
                n_hi,
                measured: c_hi as f64 / c_lo as f64,
                lambda_ratio: l_hi / l_lo,
                lambda_sq_ratio: (l_hi / l_lo).powi(2),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::One;

    #[test]
    fn critical_phase_examples() {
        // Imbalance already above n/3.
        let c = critical_phase(9, 8, 1).unwrap();
        assert_eq!(c.p_c, 0);
        // n = 12, delta = 1: 2^3 * 1 = 8 > 4.
        let c = critical_phase(12, 6, 5).unwrap();
        assert_eq!(c.p_c, 3);
        // n = 1024, delta = 2: 2^8 * 2 = 512 > 341.33.
        let c = critical_phase(1024, 513, 511).unwrap();
        assert_eq!(c.p_c, 8);
        assert_eq!(c.epoch, 2, "P = ceil(10^(1/3)) = 3");
        assert_eq!(c.phase_in_epoch, 2);
        assert_eq!(critical_phase(10, 5, 5), Err(AnalysisError::TiedInput));
    }

    #[test]
    fn critical_phase_monotonicity() {
        // Non-increasing in the imbalance.
        let mut last = u32::MAX;
        for delta in [1usize, 3, 9, 27, 81] {
            let a0 = (243 + delta) / 2;
            let c = critical_phase(243, a0, 243 - a0).unwrap();
            assert!(c.p_c <= last);
            last = c.p_c;
        }
        // Non-decreasing in n at fixed imbalance.
        let mut last = 0;
        for k in 4..14 {
            let n = (1usize << k) + 1;
            let c = critical_phase(n, n / 2 + 1, n / 2).unwrap();
            assert!(c.p_c >= last);
            last = c.p_c;
        }
    }

    #[test]
    fn broadcast_expected_small_values() {
        assert_eq!(broadcast_expected(2), BigRational::one());
        assert_eq!(broadcast_expected(3), BigRational::from(BigInt::from(3)));
        let e4 = broadcast_expected(4);
        // 3 * (1 + 1/2 + 1/3) = 11/2.
        assert_eq!(e4, BigRational::new(BigInt::from(11), BigInt::from(2)));
        assert!((broadcast_expected_f64(1024) - 7680.9).abs() < 1.0);
    }

    #[test]
    fn oracle_matches_hand_solved_chains() {
        // n=3, a0=2: 3/2 to cancel + 3 to convert the leftover weak b.
        let r = four_state_markov_oracle(3, 2).unwrap();
        assert_eq!(
            r.expected,
            BigRational::new(BigInt::from(9), BigInt::from(2))
        );
        // n=2, a0=2: already unanimous.
        let r = four_state_markov_oracle(2, 2).unwrap();
        assert!(r.expected.is_zero());
        // n=4, a0=3: hand-solved 5.
        let r = four_state_markov_oracle(4, 3).unwrap();
        assert_eq!(r.expected, BigRational::from(BigInt::from(5)));
        // Symmetric in opinions.
        let ra = four_state_markov_oracle(5, 4).unwrap();
        let rb = four_state_markov_oracle(5, 1).unwrap();
        assert_eq!(ra.expected, rb.expected);
        // Guard rails.
        assert!(four_state_markov_oracle(9, 5).is_err());
        assert!(four_state_markov_oracle(4, 2).is_err());
    }

    #[test]
    fn concentration_report_edges() {
        // t = 0: zero deviation.
        let r = check_concentration(&[0, 0, 0, 0], 0, 30.0, 10, 0);
        assert!(r.pass);
        assert_eq!(r.measured["max_deviation"], 0.0);
        // A node that never interacts deviates by 2t/n.
        let n = 16;
        let t = 16_000u64;
        let mut counts = vec![2 * t / n as u64; n];
        counts[3] = 0;
        let r = check_concentration(&counts, t, 30.0, 10, t);
        assert!(!r.pass);
        assert_eq!(r.measured["max_deviation"], 2.0 * t as f64 / n as f64);
    }

    #[test]
    fn epoch_invariant_on_hand_built_configs() {
        let p = Fm1Params::defaults(1 << 10);
        let initial: Vec<Fm1State> = (0..1024)
            .map(|i| {
                Fm1State::initial(if i < 513 {
                    crate::protocol::Opinion::A
                } else {
                    crate::protocol::Opinion::B
                })
            })
            .collect();
        let r = check_epoch_invariant(initial.iter(), 0, &p, 0);
        assert!(r.pass, "initial configuration passes trivially: {r:?}");

        // Half the population mid-epoch j-1 violates clause 2a.
        let mut bad = initial.clone();
        for s in bad.iter_mut().take(512) {
            s.epoch = 1;
        }
        for s in bad.iter_mut().skip(512) {
            s.step = (p.epoch_len / 2) as u16;
        }
        let r = check_epoch_invariant(bad.iter(), 1, &p, 7);
        assert!(!r.pass);
        assert!(r.measured["stragglers_bad"] > 0.0);
    }

    #[test]
    fn phase_invariant_stray_value_units() {
        let p = Fm1Params::defaults(1 << 10);
        let n = 1024;
        let mut states: Vec<Fm1State> = (0..n)
            .map(|_| {
                let mut s = Fm1State::initial(crate::protocol::Opinion::A);
                s.epoch = 1;
                s.age = 0;
                s.step = p.phase_bounds[1] as u16;
                s.token = None;
                s
            })
            .collect();
        // Phase invariant at (j=1, i=1), with one straggler token of
        // relative value 1 w.r.t. the end of epoch 1 (global age 2P).
        states[0].token = Some(crate::protocol::Opinion::B);
        states[0].age = (2 * p.phases - p.phases) as u8; // age_in_epoch = P
        states[0].out_of_sync = true;
        states[0].step = p.phase_bounds[1] as u16;
        let r = check_phase_invariant1(states.iter(), 1, 1, &p, 3);
        assert_eq!(r.measured["stray_value_rel_epoch_end"], 1.0);
        // i = 0 at a true epoch start is the epoch-invariant clause.
        let fresh: Vec<Fm1State> = (0..n)
            .map(|_| {
                let mut s = Fm1State::initial(crate::protocol::Opinion::A);
                s.epoch = 1;
                s.step = 0;
                s.snaps = [Snap::TokA, Snap::TokA, Snap::Unset];
                s
            })
            .collect();
        let r0 = check_phase_invariant1(fresh.iter(), 1, 0, &p, 4);
        let re = check_epoch_invariant(fresh.iter(), 1, &p, 4);
        assert_eq!(r0.pass, re.pass);
        assert!(r0.pass);
        // Empty-U configuration: stray value 0.
        assert_eq!(r0.measured["stray_value_rel_epoch_end"], 0.0);
    }

    use crate::fastmajority1::Snap;

    #[test]
    fn audit_ratio_math() {
        let ratios = audit_ratios(&[(1024, 100), (2048, 121)]);
        assert_eq!(ratios.len(), 1);
        assert!((ratios[0].measured - 1.21).abs() < 1e-9);
        assert!((ratios[0].lambda_ratio - 1.1).abs() < 1e-9);
        assert!((ratios[0].lambda_sq_ratio - 1.21).abs() < 1e-9);
    }
}
