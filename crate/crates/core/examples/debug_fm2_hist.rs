//! Histograms of worker buckets and clock steps during the additional
//! epoch of a FastMajority2 run. Development aid.

use popmaj::engine::{self, Monitor, RunOptions, SchedulerSeed};
use popmaj::fastmajority2::{FastMajority2, Fm2State};
use popmaj::harness::generous_max_interactions;
use popmaj::protocol::{Census, ExtState, Extended};
use popmaj::InputInstance;

struct Hist {
    every: u64,
    next: u64,
    printed: u32,
}

impl Monitor<Extended<FastMajority2>> for Hist {
    fn on_interaction(
        &mut self,
        t: u64,
        _: (usize, usize),
        states: &[ExtState<Fm2State>],
        census: &Census,
        _: &Extended<FastMajority2>,
    ) {
        if census.additional_epoch == 0 || t < self.next || self.printed > 14 {
            return;
        }
        self.next = t + self.every;
        self.printed += 1;
        let mut buckets = std::collections::BTreeMap::new();
        let mut clocks = std::collections::BTreeMap::new();
        let mut ages = std::collections::BTreeMap::new();
        let mut tokens = 0u32;
        for s in states {
            match s.fast {
                Fm2State::Worker(w) if w.additional => {
                    *buckets.entry(w.bucket).or_insert(0u32) += 1;
                    if w.token.is_some() {
                        tokens += 1;
                        *ages.entry(w.age).or_insert(0u32) += 1;
                    }
                }
                Fm2State::Clock(c) => {
                    *clocks.entry(c.step / 71).or_insert(0u32) += 1;
                }
                _ => {}
            }
        }
        println!(
            "t={t} fail={} done={} tokens={tokens}\n  buckets={buckets:?}\n  ages={ages:?}\n  clock_phase={clocks:?}",
            census.fail,
            census.done_a + census.done_b
        );
    }
}

fn main() {
    let n: usize = 1024;
    let seed: u64 = 1001;
    let inst = InputInstance::new(n, n / 2 + 1).unwrap();
    let p = Extended::new(FastMajority2::with_defaults(inst));
    let opts = RunOptions::for_population(n).with_max(generous_max_interactions(n));
    let mut w = Hist {
        every: 60_000,
        next: 0,
        printed: 0,
    };
    let r = engine::run_with_monitor(&p, SchedulerSeed(seed), &opts, &mut w);
    println!("outcome {:?}", r.metrics.outcome);
}
