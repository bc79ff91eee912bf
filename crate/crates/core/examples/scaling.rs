//! Scaling probe for the logarithmic-phase and epoch-based protocols:
//! median parallel stabilization time over lambda^2 across a doubling
//! ladder. Development aid.

use popmaj::engine::{self, lambda, RunOptions, RunOutcome, SchedulerSeed};
use popmaj::fastmajority1::FastMajority1;
use popmaj::harness::generous_max_interactions;
use popmaj::majority::Majority;
use popmaj::protocol::{Extended, Protocol};
use popmaj::InputInstance;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn probe<P: Protocol>(p: &P, seeds: u64) -> (f64, u32, u32) {
    let n = p.population();
    let opts = RunOptions::for_population(n).with_max(generous_max_interactions(n));
    let mut ts = Vec::new();
    let mut fails = 0;
    let mut timeouts = 0;
    for s in 0..seeds {
        let r = engine::run(p, SchedulerSeed(7000 + s), &opts);
        match r.metrics.outcome {
            RunOutcome::Timeout => timeouts += 1,
            RunOutcome::AllFailBackup => {
                fails += 1;
                ts.push(r.metrics.parallel_ts().unwrap());
            }
            _ => ts.push(r.metrics.parallel_ts().unwrap()),
        }
    }
    (median(ts), fails, timeouts)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let max_exp: u32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(18);
    println!("n,lambda,protocol,ts_median,ts_over_lambda2,fails,timeouts");
    for exp in 10..=max_exp {
        let n = 1usize << exp;
        let inst = InputInstance::new(n, n / 2 + 1).unwrap();
        let lam = lambda(n) as f64;
        let (m, f, t) = probe(&Extended::new(Majority::with_defaults(inst)), seeds);
        println!("{n},{lam},majority,{m:.1},{:.4},{f},{t}", m / (lam * lam));
        let (m, f, t) = probe(&Extended::new(FastMajority1::with_defaults(inst)), seeds);
        println!("{n},{lam},fastmajority1,{m:.1},{:.4},{f},{t}", m / (lam * lam));
    }
}
