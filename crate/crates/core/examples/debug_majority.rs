//! Hunts for an incorrect-stable majority run at small n and dumps the
//! events around the first done/fail transitions. Development aid.

use popmaj::engine::{self, snapshot, Monitor, RunOptions, RunOutcome, SchedulerSeed};
use popmaj::harness::generous_max_interactions;
use popmaj::majority::{Majority, MajorityState};
use popmaj::protocol::{Census, ExtState, Extended, NodeStatus, Protocol};
use popmaj::InputInstance;

struct DoneWatcher {
    reported: u32,
    last_fail: u32,
    prev: Vec<ExtState<MajorityState>>,
}

impl Monitor<Extended<Majority>> for DoneWatcher {
    fn on_interaction(
        &mut self,
        t: u64,
        pair: (usize, usize),
        states: &[ExtState<MajorityState>],
        census: &Census,
        p: &Extended<Majority>,
    ) {
        if census.fail > self.last_fail && self.reported < 12 {
            self.reported += 1;
            if !self.prev.is_empty() {
                println!(
                    "t={t} FAIL PRE : {} {} (meets {} {})",
                    p.encode(&self.prev[pair.0]),
                    p.encode(&self.prev[pair.1]),
                    self.prev[pair.0].fast.stage_meets,
                    self.prev[pair.1].fast.stage_meets,
                );
            }
            println!(
                "t={t} FAIL POST: {} {} (done_a={} done_b={} fail={})",
                p.encode(&states[pair.0]),
                p.encode(&states[pair.1]),
                census.done_a,
                census.done_b,
                census.fail
            );
        }
        self.last_fail = census.fail;
        if self.prev.is_empty() {
            self.prev = states.to_vec();
        } else {
            self.prev.copy_from_slice(states);
        }
        let done = census.done_a + census.done_b;
        if done > 0 && self.reported >= 900 {
            self.reported += 1;
            let mut tok_a = 0;
            let mut tok_b = 0;
            let mut empt = 0;
            let mut phase_hist = std::collections::BTreeMap::new();
            for s in states {
                match s.fast.token {
                    Some(popmaj::Opinion::A) => tok_a += 1,
                    Some(popmaj::Opinion::B) => tok_b += 1,
                    None => empt += 1,
                }
                *phase_hist.entry(s.fast.phase).or_insert(0u32) += 1;
            }
            println!(
                "t={t} pair={pair:?} done_a={} done_b={} fail={} tokens A={tok_a} B={tok_b} empty={empt} phases={phase_hist:?}",
                census.done_a, census.done_b, census.fail
            );
            println!(
                "   i: {}   j: {}",
                p.encode(&states[pair.0]),
                p.encode(&states[pair.1])
            );
        }
    }
}

fn main() {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(64);
    let seeds: std::ops::Range<u64> = 7000..7012;
    let inst = InputInstance::new(n, n / 2 + 1).unwrap();
    let p = Extended::new(Majority::with_defaults(inst));
    let opts = RunOptions::for_population(n).with_max(generous_max_interactions(n));
    for seed in seeds {
        let r = engine::run(&p, SchedulerSeed(seed), &opts);
        println!(
            "seed {seed}: {:?} ts={:?} first_done={:?} first_fail={:?}",
            r.metrics.outcome,
            r.metrics.parallel_ts(),
            r.metrics.first_done,
            r.metrics.first_fail
        );
        if r.metrics.outcome == RunOutcome::IncorrectStable
            || r.metrics.first_fail.is_some()
        {
            println!(
                "seed {seed}: outcome {:?} first_done={:?} first_fail={:?} ts={:?}",
                r.metrics.outcome, r.metrics.first_done, r.metrics.first_fail,
                r.metrics.stabilization_interactions
            );
            let mut w = DoneWatcher {
                reported: 0,
                last_fail: 0,
                prev: Vec::new(),
            };
            let rr = engine::run_with_monitor(&p, SchedulerSeed(seed), &opts, &mut w);
            let snap = snapshot(&p, &rr.final_config);
            println!("final classes: {:?}", snap.classes);
            return;
        }
    }
    println!("no incorrect run in the scanned seeds");
}
