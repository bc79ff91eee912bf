//! Quick dynamics calibration: run each protocol across a few sizes and
//! report outcomes, times and rates. Development aid, not part of the test
//! suite.

use std::time::Instant;

use popmaj::engine::{self, RunOptions, RunOutcome, SchedulerSeed};
use popmaj::fastmajority1::FastMajority1;
use popmaj::fastmajority2::FastMajority2;
use popmaj::harness::generous_max_interactions;
use popmaj::majority::Majority;
use popmaj::protocol::{Extended, FourStateProtocol, Protocol};
use popmaj::InputInstance;

fn bench<P: Protocol>(label: &str, p: &P, seeds: u64) {
    let n = p.population();
    let opts = RunOptions::for_population(n).with_max(generous_max_interactions(n));
    let t0 = Instant::now();
    let mut total: u64 = 0;
    let mut outcomes = [0u32; 4];
    let mut ts_sum = 0f64;
    let mut oos_max = 0;
    for s in 0..seeds {
        let r = engine::run(p, SchedulerSeed(1000 + s), &opts);
        total += r.metrics.interactions;
        let idx = match r.metrics.outcome {
            RunOutcome::CorrectDone => 0,
            RunOutcome::AllFailBackup => 1,
            RunOutcome::IncorrectStable => 2,
            RunOutcome::Timeout => 3,
        };
        outcomes[idx] += 1;
        ts_sum += r.metrics.parallel_ts().unwrap_or(f64::NAN);
        oos_max = oos_max.max(r.metrics.max_out_of_sync);
        if r.metrics.conservation_violation.is_some() {
            println!("  !! conservation violation at seed {s}");
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{label}: n={n} seeds={seeds} done/fail/incorrect/timeout={outcomes:?} mean_ts={:.1} oos_max={oos_max} {:.1}M inter {:.0} ns/inter",
        ts_sum / seeds as f64,
        total as f64 / 1e6,
        dt * 1e9 / total.max(1) as f64
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("all");
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);

    for exp in [6usize, 8, 10, 12, 14] {
        let n = 1usize << exp;
        let inst = InputInstance::new(n, n / 2 + 1).unwrap();
        if which == "all" || which == "fourstate" {
            if exp <= 10 {
                bench("fourstate", &FourStateProtocol::new(inst), seeds);
            }
        }
        if which == "all" || which == "majority" {
            bench("majority ", &Extended::new(Majority::with_defaults(inst)), seeds);
        }
        if which == "all" || which == "fm1" {
            bench("fm1      ", &Extended::new(FastMajority1::with_defaults(inst)), seeds);
        }
        if which == "all" || which == "fm2" {
            bench("fm2      ", &Extended::new(FastMajority2::with_defaults(inst)), seeds);
        }
    }
}
