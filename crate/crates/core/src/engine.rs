//! The population, the uniform random scheduler, the sequential interaction
//! loop, determinism, and metric collection hooks.
//!
//! A single run is strictly sequential: interactions are totally ordered and
//! the engine never mutates any agents other than the scheduled pair. The
//! whole trace is a pure function of `(protocol, instance, params, seed)`.
//!
//! RNG: xoshiro256++ seeded from a 64-bit seed through SplitMix64 (the
//! `SeedableRng::seed_from_u64` path of `rand_xoshiro` 0.6). The stream
//! split rule for sweeps is: run `k` of a sweep with base seed `s` uses the
//! single-stream generator seeded with `s + k`; every per-run record carries
//! its own seed so any run can be reproduced in isolation. Both the
//! algorithm and the split rule are frozen; changing either is a format
//! break.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Census, NodeStatus, Opinion, Protocol};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("population must have at least 2 nodes, got {0}")]
    PopulationTooSmall(usize),
    #[error("a0 must not exceed n ({a0} > {n})")]
    SplitOutOfRange { n: usize, a0: usize },
    #[error("tied input a0 = b0 = {0} is rejected; exact majority requires a0 != b0")]
    TiedInput(usize),
}

/// A majority-voting input: `n` nodes, `a0` holding opinion A and
/// `b0 = n - a0` holding opinion B, with `a0 != b0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputInstance {
    n: usize,
    a0: usize,
}

impl InputInstance {
    pub fn new(n: usize, a0: usize) -> Result<InputInstance, EngineError> {
        if n < 2 {
            return Err(EngineError::PopulationTooSmall(n));
        }
        if a0 > n {
            return Err(EngineError::SplitOutOfRange { n, a0 });
        }
        if 2 * a0 == n {
            return Err(EngineError::TiedInput(a0));
        }
        Ok(InputInstance { n, a0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn a0(&self) -> usize {
        self.a0
    }

    pub fn b0(&self) -> usize {
        self.n - self.a0
    }

    pub fn majority(&self) -> Opinion {
        if self.a0 > self.b0() {
            Opinion::A
        } else {
            Opinion::B
        }
    }

    /// a0 - b0 as a signed count.
    pub fn signed_imbalance(&self) -> i64 {
        self.a0 as i64 - self.b0() as i64
    }

    /// |a0 - b0|.
    pub fn imbalance(&self) -> usize {
        self.a0.abs_diff(self.b0())
    }

    /// epsilon = |a0 - b0| / n.
    pub fn epsilon(&self) -> f64 {
        self.imbalance() as f64 / self.n as f64
    }
}

/// ceil(log2 n) for n >= 2.
pub fn lambda(n: usize) -> u32 {
    assert!(n >= 2);
    (usize::BITS - (n - 1).leading_zeros()) as u32
}

/// Default interaction budget: 64 * n * ceil(log2 n)^2, comfortably above
/// the protocols' high-probability bounds at desk scale.
pub fn default_max_interactions(n: usize) -> u64 {
    64 * n as u64 * (lambda(n) as u64).pow(2)
}

/// 64-bit seed identifying one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchedulerSeed(pub u64);

impl SchedulerSeed {
    pub fn rng(self) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(self.0)
    }

    /// Seed of run `k` in a sweep rooted at this base seed.
    pub fn for_run(self, k: u64) -> SchedulerSeed {
        SchedulerSeed(self.0.wrapping_add(k))
    }
}

/// Draws an ordered pair of distinct node indices. The unordered pair is
/// uniform over all n(n-1)/2 pairs and each ordering is equiprobable;
/// advancing the generator is the only side effect.
#[inline]
pub fn schedule_pair<R: Rng>(rng: &mut R, n: usize) -> (usize, usize) {
    debug_assert!(n >= 2);
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

/// Outcome classification of a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunOutcome {
    /// Stable with every node outputting the true majority.
    CorrectDone,
    /// Stable in the all-fail configuration with the backup unanimous in the
    /// true majority.
    AllFailBackup,
    /// Stable but wrong (never expected; reported, not masked).
    IncorrectStable,
    /// Interaction budget exhausted before stabilization.
    Timeout,
}

impl RunOutcome {
    pub fn is_correct_stable(self) -> bool {
        matches!(self, RunOutcome::CorrectDone | RunOutcome::AllFailBackup)
    }
}

/// Metrics of one run. Interaction counts convert to parallel time by
/// dividing by n.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n: usize,
    pub interactions: u64,
    pub outcome: RunOutcome,
    pub stabilization_interactions: Option<u64>,
    pub convergence_interactions: Option<u64>,
    pub first_done: Option<u64>,
    pub first_fail: Option<u64>,
    /// Epoch j_f of the first node that triggered the additional epoch.
    pub final_epoch: Option<u8>,
    pub additional_epoch_trigger: Option<u64>,
    pub max_out_of_sync: u32,
    /// First interaction at which the exact conservation check failed, if
    /// it ever did before the scope ended.
    pub conservation_violation: Option<u64>,
    /// Distinct canonical states observed, when the audit was enabled.
    pub states_seen: Option<u64>,
}

impl RunMetrics {
    pub fn parallel_ts(&self) -> Option<f64> {
        self.stabilization_interactions
            .map(|t| t as f64 / self.n as f64)
    }

    pub fn parallel_tc(&self) -> Option<f64> {
        self.convergence_interactions
            .map(|t| t as f64 / self.n as f64)
    }
}

/// One interaction record of an event trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub t: u64,
    pub initiator: usize,
    pub responder: usize,
    pub before: (String, String),
    pub after: (String, String),
}

impl fmt::Display for TraceRecord {
    /// Line format: `t,i,j,state_i_before,state_j_before,state_i_after,state_j_after`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.t,
            self.initiator,
            self.responder,
            self.before.0,
            self.before.1,
            self.after.0,
            self.after.1
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub max_interactions: u64,
    /// Keep the full event trace in memory.
    pub record_trace: bool,
    /// Count distinct canonical states.
    pub audit_states: bool,
    /// Check the exact signed token-value sum after every interaction while
    /// the conservation scope is open.
    pub check_conservation: bool,
}

impl RunOptions {
    pub fn for_population(n: usize) -> RunOptions {
        RunOptions {
            max_interactions: default_max_interactions(n),
            record_trace: false,
            audit_states: false,
            check_conservation: true,
        }
    }

    pub fn with_max(mut self, max_interactions: u64) -> RunOptions {
        self.max_interactions = max_interactions;
        self
    }

    pub fn with_trace(mut self) -> RunOptions {
        self.record_trace = true;
        self
    }

    pub fn with_audit(mut self) -> RunOptions {
        self.audit_states = true;
        self
    }
}

pub struct RunResult<S> {
    pub final_config: Vec<S>,
    pub metrics: RunMetrics,
    pub trace: Option<Vec<TraceRecord>>,
}

/// Observer hook invoked after every applied interaction. Monomorphized so
/// the no-op monitor costs nothing.
pub trait Monitor<P: Protocol> {
    fn on_interaction(
        &mut self,
        t: u64,
        pair: (usize, usize),
        states: &[P::State],
        census: &Census,
        protocol: &P,
    );
}

/// Monitor that does nothing.
pub struct NoMonitor;

impl<P: Protocol> Monitor<P> for NoMonitor {
    #[inline(always)]
    fn on_interaction(&mut self, _: u64, _: (usize, usize), _: &[P::State], _: &Census, _: &P) {}
}

/// Runs two monitors side by side.
pub struct PairMonitor<'a, A, B>(pub &'a mut A, pub &'a mut B);

impl<P: Protocol, A: Monitor<P>, B: Monitor<P>> Monitor<P> for PairMonitor<'_, A, B> {
    #[inline]
    fn on_interaction(
        &mut self,
        t: u64,
        pair: (usize, usize),
        states: &[P::State],
        census: &Census,
        protocol: &P,
    ) {
        self.0.on_interaction(t, pair, states, census, protocol);
        self.1.on_interaction(t, pair, states, census, protocol);
    }
}

pub fn run<P: Protocol>(p: &P, seed: SchedulerSeed, opts: &RunOptions) -> RunResult<P::State> {
    run_with_monitor(p, seed, opts, &mut NoMonitor)
}

/// The sequential interaction loop: schedules uniform pairs, applies the
/// protocol transition, and maintains the running census, stability
/// detection, convergence tracking and the conservation monitor, all O(1)
/// per interaction.
pub fn run_with_monitor<P: Protocol, M: Monitor<P>>(
    p: &P,
    seed: SchedulerSeed,
    opts: &RunOptions,
    monitor: &mut M,
) -> RunResult<P::State> {
    let n = p.population();
    assert!(n >= 2);
    let mut rng = seed.rng();
    let mut states = p.initial_config();
    assert_eq!(states.len(), n);

    let mut census = Census::new();
    for s in &states {
        census.add(&p.facts(s));
    }

    let majority = p.true_majority();
    let conservation_target = p.conservation_target();

    let mut audit: Option<HashSet<u64>> = if opts.audit_states {
        let mut set = HashSet::new();
        for s in &states {
            set.insert(p.state_key(s));
        }
        Some(set)
    } else {
        None
    };
    let mut trace: Option<Vec<TraceRecord>> = if opts.record_trace {
        Some(Vec::new())
    } else {
        None
    };

    let mut metrics = RunMetrics {
        n,
        interactions: 0,
        outcome: RunOutcome::Timeout,
        stabilization_interactions: None,
        convergence_interactions: None,
        first_done: None,
        first_fail: None,
        final_epoch: None,
        additional_epoch_trigger: None,
        max_out_of_sync: 0,
        conservation_violation: None,
        states_seen: None,
    };

    // last configuration index at which some node's output differed from
    // the true majority; -1 if never.
    let mut last_incorrect: i64 = -1;
    if let Some(m) = majority {
        if census.output_count(m) != census.population {
            last_incorrect = 0;
        }
    }

    let mut t: u64 = 0;
    loop {
        if p.is_stable(&census) {
            metrics.stabilization_interactions = Some(t);
            break;
        }
        if t >= opts.max_interactions {
            break;
        }

        let (i, j) = schedule_pair(&mut rng, n);
        let mut si = states[i];
        let mut sj = states[j];
        let before = trace
            .as_ref()
            .map(|_| (p.encode(&si), p.encode(&sj)));

        census.remove(&p.facts(&si));
        census.remove(&p.facts(&sj));
        p.apply(&mut si, &mut sj);
        let fi = p.facts(&si);
        let fj = p.facts(&sj);
        census.add(&fi);
        census.add(&fj);
        states[i] = si;
        states[j] = sj;
        t += 1;

        if let Some(set) = audit.as_mut() {
            set.insert(p.state_key(&si));
            set.insert(p.state_key(&sj));
        }
        if let Some(tr) = trace.as_mut() {
            let before = before.unwrap();
            tr.push(TraceRecord {
                t,
                initiator: i,
                responder: j,
                before,
                after: (p.encode(&si), p.encode(&sj)),
            });
        }

        // Event log.
        if metrics.first_done.is_none() && census.done_total() > 0 {
            metrics.first_done = Some(t);
        }
        if metrics.first_fail.is_none() && census.fail > 0 {
            metrics.first_fail = Some(t);
        }
        if metrics.additional_epoch_trigger.is_none() && census.additional_epoch > 0 {
            metrics.additional_epoch_trigger = Some(t);
            metrics.final_epoch = if fi.additional_epoch {
                fi.epoch
            } else {
                fj.epoch
            };
        }
        if census.out_of_sync > metrics.max_out_of_sync {
            metrics.max_out_of_sync = census.out_of_sync;
        }

        if opts.check_conservation && census.scope_enders == 0 {
            if let Some(target) = conservation_target {
                if census.value_sum != target && metrics.conservation_violation.is_none() {
                    metrics.conservation_violation = Some(t);
                }
            }
        }

        if let Some(m) = majority {
            if census.output_count(m) != census.population {
                last_incorrect = t as i64;
            }
        }

        monitor.on_interaction(t, (i, j), &states, &census, p);
    }

    metrics.interactions = t;
    metrics.outcome = classify_outcome(p, &census, majority, &metrics);
    if metrics.outcome.is_correct_stable() {
        metrics.convergence_interactions = Some((last_incorrect + 1) as u64);
    }
    metrics.states_seen = audit.map(|set| set.len() as u64);

    RunResult {
        final_config: states,
        metrics,
        trace,
    }
}

fn classify_outcome<P: Protocol>(
    p: &P,
    census: &Census,
    majority: Option<Opinion>,
    metrics: &RunMetrics,
) -> RunOutcome {
    if metrics.stabilization_interactions.is_none() {
        return RunOutcome::Timeout;
    }
    let correct = match majority {
        Some(m) => census.output_count(m) == census.population,
        None => true,
    };
    if !correct {
        return RunOutcome::IncorrectStable;
    }
    if census.fail == census.population && census.population > 0 && p.conservation_target().is_some()
    {
        RunOutcome::AllFailBackup
    } else {
        RunOutcome::CorrectDone
    }
}

/// Aggregate census of a configuration snapshot: counts per state class
/// (token type, age, status flags) and per (epoch, epoch-step bucket).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotCensus {
    pub population: u64,
    pub classes: BTreeMap<String, u64>,
    pub epoch_buckets: BTreeMap<(u32, u32), u64>,
}

impl SnapshotCensus {
    pub fn total(&self) -> u64 {
        self.classes.values().sum()
    }
}

/// Pure aggregate census over a configuration.
pub fn snapshot<P: Protocol>(p: &P, states: &[P::State]) -> SnapshotCensus {
    let mut classes: BTreeMap<String, u64> = BTreeMap::new();
    let mut epoch_buckets: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for s in states {
        let (class, bucket) = p.classify(s);
        *classes.entry(class).or_insert(0) += 1;
        if let Some(b) = bucket {
            *epoch_buckets.entry(b).or_insert(0) += 1;
        }
    }
    SnapshotCensus {
        population: states.len() as u64,
        classes,
        epoch_buckets,
    }
}

/// Observed status of a node for terminator bookkeeping in tests.
pub fn status_counts<P: Protocol>(p: &P, states: &[P::State]) -> (u32, u32, u32) {
    let mut done = 0;
    let mut fail = 0;
    let mut active = 0;
    for s in states {
        match p.facts(s).status {
            NodeStatus::Done(_) => done += 1,
            NodeStatus::Fail => fail += 1,
            NodeStatus::Active => active += 1,
        }
    }
    (active, done, fail)
}
