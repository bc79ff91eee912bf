//! Dumps the first fail/additional-epoch events of a FastMajority2 run.
//! Development aid.

use popmaj::engine::{self, Monitor, RunOptions, SchedulerSeed};
use popmaj::fastmajority2::{FastMajority2, Fm2State};
use popmaj::harness::generous_max_interactions;
use popmaj::protocol::{Census, ExtState, Extended, Protocol};
use popmaj::InputInstance;

struct FailWatcher {
    printed: u32,
    last_fail: u32,
    last_additional: u32,
    prev: Vec<ExtState<Fm2State>>,
}

impl Monitor<Extended<FastMajority2>> for FailWatcher {
    fn on_interaction(
        &mut self,
        t: u64,
        pair: (usize, usize),
        states: &[ExtState<Fm2State>],
        census: &Census,
        p: &Extended<FastMajority2>,
    ) {
        if census.additional_epoch > self.last_additional && self.printed < 8 {
            self.printed += 1;
            println!(
                "t={t} ADDITIONAL #{}: pair {} {}",
                census.additional_epoch,
                p.encode(&states[pair.0]),
                p.encode(&states[pair.1])
            );
        }
        self.last_additional = census.additional_epoch;
        if census.fail > self.last_fail && self.printed < 18 {
            self.printed += 1;
            if !self.prev.is_empty() {
                println!(
                    "t={t} PRE : {} {}",
                    p.encode(&self.prev[pair.0]),
                    p.encode(&self.prev[pair.1])
                );
                for idx in [pair.0, pair.1] {
                    if let Fm2State::Worker(w) = self.prev[idx].fast {
                        println!(
                            "      raw[{idx}]: bucket={} doubled={} oos={} add={} heavy={} age={} meets={}",
                            w.bucket, w.doubled, w.out_of_sync, w.additional, w.heavy, w.age, w.stage_meets
                        );
                    }
                }
            }
            let mut census_roles = (0u32, 0u32, 0u32);
            for s in states {
                match s.fast {
                    Fm2State::Unassigned(_) => census_roles.0 += 1,
                    Fm2State::Clock(_) => census_roles.1 += 1,
                    Fm2State::Worker(_) => census_roles.2 += 1,
                }
            }
            println!(
                "t={t} FAIL x{} (u/c/w={census_roles:?}, oos={}, ae={}): pair {} {}",
                census.fail,
                census.out_of_sync,
                census.additional_epoch,
                p.encode(&states[pair.0]),
                p.encode(&states[pair.1])
            );
        }
        self.last_fail = census.fail;
        if census.fail > 0 && self.printed < 18 {
            self.prev = states.to_vec();
        } else if self.prev.is_empty() && census.additional_epoch > 0 {
            self.prev = states.to_vec();
        } else if !self.prev.is_empty() {
            self.prev.copy_from_slice(states);
        }
    }
}

fn main() {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(256);
    let seed: u64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1000);
    let inst = InputInstance::new(n, n / 2 + 1).unwrap();
    let p = Extended::new(FastMajority2::with_defaults(inst));
    let opts = RunOptions::for_population(n).with_max(generous_max_interactions(n));
    let mut w = FailWatcher {
        printed: 0,
        last_fail: 0,
        last_additional: 0,
        prev: Vec::new(),
    };
    let r = engine::run_with_monitor(&p, SchedulerSeed(seed), &opts, &mut w);
    println!(
        "outcome {:?} ts={:?} first_fail={:?} ae_trigger={:?} j_f={:?} interactions={}",
        r.metrics.outcome,
        r.metrics.stabilization_interactions,
        r.metrics.first_fail,
        r.metrics.additional_epoch_trigger,
        r.metrics.final_epoch,
        r.metrics.interactions
    );
}
