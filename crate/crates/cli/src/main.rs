//! Experiment harness CLI for the exact-majority population protocols.
//!
//! Subcommands: `run`, `sweep`, `bench-broadcast`, `oracle`,
//! `audit-states`, `check-invariants`. Exit codes: 0 success, 2 invalid
//! configuration, 3 when any run timed out.
//!
//! Option precedence: command-line flags override the optional TOML config
//! file, which overrides built-in defaults. The environment variable
//! `POPMAJ_SEED_BASE` supplies the default seed base only.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use popmaj::analysis::{
    four_state_markov_oracle, ConcentrationMonitor, ConcentrationParams, EpochInvariantMonitor,
};
use popmaj::engine::{self, PairMonitor, RunOptions, RunOutcome, SchedulerSeed};
use popmaj::fastmajority1::FastMajority1;
use popmaj::harness::{
    self, audit_sweep, bench_broadcast, sweep_csv, ExperimentSpec, ProtocolKind, SweepSpec,
};
use popmaj::protocol::Extended;
use popmaj::InputInstance;

const EXIT_INVALID: u8 = 2;
const EXIT_TIMEOUT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "popmaj",
    about = "Exact-majority population protocol simulator and experiment harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute runs of one protocol on one instance; one JSON record per run.
    Run(RunArgs),
    /// Run a protocol ladder and emit the aggregate CSV table.
    Sweep(SweepArgs),
    /// Benchmark the single-source epidemic broadcast.
    BenchBroadcast(BenchArgs),
    /// Exact expected stabilization interactions of the 4-state protocol.
    Oracle(OracleArgs),
    /// Count distinct observed states across a ladder.
    AuditStates(AuditArgs),
    /// Run the epoch-invariant and concentration monitors.
    CheckInvariants(CheckArgs),
}

#[derive(Args, Clone)]
struct CommonRunArgs {
    /// Protocol: fourstate | majority | fastmajority1 | fastmajority2.
    #[arg(long)]
    protocol: Option<String>,
    /// Population size.
    #[arg(long)]
    n: Option<usize>,
    /// Initial count of opinion A (alternative to --imbalance).
    #[arg(long)]
    a0: Option<usize>,
    /// |a0 - b0|; a0 is derived as (n + imbalance)/2.
    #[arg(long)]
    imbalance: Option<usize>,
    /// Phase-length constant C.
    #[arg(long, value_name = "C")]
    big_c: Option<f64>,
    /// Buffer/analysis constant c.
    #[arg(long, value_name = "c")]
    small_c: Option<f64>,
    /// Number of seeds (runs).
    #[arg(long)]
    seeds: Option<u64>,
    /// Base seed; run k uses seed base+k.
    #[arg(long)]
    seed_base: Option<u64>,
    /// Interaction budget per run (default 64 n ceil(log2 n)^2).
    #[arg(long)]
    max_interactions: Option<u64>,
    /// Count distinct observed states.
    #[arg(long)]
    audit: bool,
    /// Fan runs out across threads (records stay in seed order).
    #[arg(long)]
    parallel: bool,
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl CommonRunArgs {
    fn build_spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<ExperimentSpec>(&text).context("parsing config")?
            }
            None => ExperimentSpec::default(),
        };
        if let Ok(base) = std::env::var("POPMAJ_SEED_BASE") {
            spec.seed_base = base.parse().context("POPMAJ_SEED_BASE must be a u64")?;
        }
        if let Some(p) = &self.protocol {
            spec.protocol = ProtocolKind::parse(p)?;
        }
        if let Some(n) = self.n {
            spec.n = n;
        }
        if let Some(a0) = self.a0 {
            spec.a0 = Some(a0);
        }
        if let Some(d) = self.imbalance {
            spec.imbalance = Some(d);
            spec.a0 = None;
        }
        if let Some(c) = self.big_c {
            spec.big_c = Some(c);
        }
        if let Some(c) = self.small_c {
            spec.small_c = Some(c);
        }
        if let Some(s) = self.seeds {
            spec.seeds = s;
        }
        if let Some(s) = self.seed_base {
            spec.seed_base = s;
        }
        if let Some(m) = self.max_interactions {
            spec.max_interactions = Some(m);
        }
        if self.audit {
            spec.audit_states = true;
        }
        if self.parallel {
            spec.parallel = true;
        }
        Ok(spec)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Write the per-interaction trace of the first run to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated protocols.
    #[arg(long, default_value = "majority")]
    protocol: String,
    /// Comma-separated population ladder (at least 3 sizes).
    #[arg(long, value_name = "N1,N2,...")]
    n_ladder: String,
    #[arg(long, default_value_t = 2)]
    imbalance: usize,
    #[arg(long, value_name = "C")]
    big_c: Option<f64>,
    #[arg(long, value_name = "c")]
    small_c: Option<f64>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    max_interactions: Option<u64>,
    #[arg(long)]
    parallel: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    runs: u64,
    #[arg(long, default_value_t = 1)]
    seed_base: u64,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    a0: usize,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long, default_value = "fastmajority2")]
    protocol: String,
    #[arg(long, value_name = "N1,N2,...")]
    n_ladder: String,
    #[arg(long, default_value_t = 2)]
    imbalance: usize,
    #[arg(long, value_name = "C")]
    big_c: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 1)]
    seed_base: u64,
}

#[derive(Args)]
struct CheckArgs {
    /// Population size for the monitored runs.
    #[arg(long, default_value_t = 16384)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    imbalance: usize,
    #[arg(long, default_value_t = 10)]
    runs: u64,
    #[arg(long, default_value_t = 1)]
    seed_base: u64,
    /// Window constant of the concentration check.
    #[arg(long, default_value_t = 96.0)]
    concentration_c: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::BenchBroadcast(args) => cmd_bench(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::AuditStates(args) => cmd_audit(args),
        Command::CheckInvariants(args) => cmd_check(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let spec = args.common.build_spec()?;
    if let Some(path) = &args.trace {
        write_trace(&spec, path)?;
    }
    let records = harness::execute(&spec)?;
    let mut out = std::io::stdout().lock();
    out.write_all(harness::to_jsonl(&records).as_bytes())?;
    let timeouts = records.iter().any(|r| r.outcome == RunOutcome::Timeout);
    Ok(if timeouts {
        ExitCode::from(EXIT_TIMEOUT)
    } else {
        ExitCode::SUCCESS
    })
}

fn write_trace(spec: &ExperimentSpec, path: &PathBuf) -> Result<()> {
    let inst = spec.instance()?;
    let mut opts = RunOptions::for_population(spec.n).with_trace();
    if let Some(m) = spec.max_interactions {
        opts.max_interactions = m;
    }
    let seed = SchedulerSeed(spec.seed_base);
    let trace = match spec.protocol {
        ProtocolKind::FourState => {
            let p = popmaj::protocol::FourStateProtocol::new(inst);
            engine::run(&p, seed, &opts).trace
        }
        ProtocolKind::Majority => {
            let params = harness::majority_params(spec, spec.n)?;
            let p = Extended::new(popmaj::majority::Majority::new(inst, params));
            engine::run(&p, seed, &opts).trace
        }
        ProtocolKind::FastMajority1 => {
            let params = harness::fm1_params(spec, spec.n)?;
            let p = Extended::new(FastMajority1::new(inst, params));
            engine::run(&p, seed, &opts).trace
        }
        ProtocolKind::FastMajority2 => {
            let params = harness::fm2_params(spec, spec.n)?;
            let p = Extended::new(popmaj::fastmajority2::FastMajority2::new(inst, params));
            engine::run(&p, seed, &opts).trace
        }
    };
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for rec in trace.unwrap_or_default() {
        writeln!(f, "{rec}")?;
    }
    Ok(())
}

fn parse_ladder(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .context("ladder entries must be integers")
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let protocols = args
        .protocol
        .split(',')
        .map(|p| ProtocolKind::parse(p.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let seed_base = match args.seed_base {
        Some(s) => s,
        None => std::env::var("POPMAJ_SEED_BASE")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(1),
    };
    let spec = SweepSpec {
        protocols,
        ladder: parse_ladder(&args.n_ladder)?,
        imbalance: args.imbalance,
        seeds: args.seeds,
        seed_base,
        big_c: args.big_c,
        small_c: args.small_c,
        max_interactions: args.max_interactions,
        parallel: args.parallel,
    };
    let rows = harness::sweep(&spec)?;
    let csv = sweep_csv(&rows);
    match &args.out {
        Some(path) => fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    let timeouts = rows.iter().any(|r| r.timeouts > 0);
    Ok(if timeouts {
        ExitCode::from(EXIT_TIMEOUT)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    if args.n < 2 {
        bail!("broadcast needs n >= 2");
    }
    let stats = bench_broadcast(args.n, args.runs, args.seed_base, args.parallel);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(args: OracleArgs) -> Result<ExitCode> {
    let result = four_state_markov_oracle(args.n, args.a0)?;
    println!(
        "{}",
        serde_json::json!({
            "n": result.n,
            "a0": result.a0,
            "expected_interactions": {
                "numerator": result.expected.numer().to_string(),
                "denominator": result.expected.denom().to_string(),
                "approx": result.expected_f64,
            },
            "transient_states": result.transient_states,
            "absorbing": result.absorbing,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_audit(args: AuditArgs) -> Result<ExitCode> {
    let protocol = ProtocolKind::parse(&args.protocol)?;
    let ladder = parse_ladder(&args.n_ladder)?;
    let report = audit_sweep(
        protocol,
        &ladder,
        args.imbalance,
        args.seeds,
        args.seed_base,
        args.big_c,
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(args: CheckArgs) -> Result<ExitCode> {
    let n = args.n;
    if (n + args.imbalance) % 2 != 0 {
        bail!("imbalance and n must have the same parity");
    }
    let a0 = (n + args.imbalance) / 2;
    let inst = InputInstance::new(n, a0)?;
    let cparams = ConcentrationParams {
        big_c: args.concentration_c,
        small_c: args.concentration_c.powf(0.75),
    };
    let mut epoch_pass = 0u64;
    let mut epoch_total = 0u64;
    let mut conc_pass = 0u64;
    let mut conc_total = 0u64;
    let mut out = std::io::stdout().lock();
    for k in 0..args.runs {
        let params = popmaj::fastmajority1::Fm1Params::defaults(n);
        let p = Extended::new(FastMajority1::new(inst, params.clone()));
        let opts =
            RunOptions::for_population(n).with_max(harness::generous_max_interactions(n));
        let mut epochs = EpochInvariantMonitor::new(params);
        let mut conc = ConcentrationMonitor::new(n, cparams);
        {
            let mut both = PairMonitor(&mut epochs, &mut conc);
            let seed = SchedulerSeed(args.seed_base).for_run(k);
            engine::run_with_monitor(&p, seed, &opts, &mut both);
        }
        for rep in epochs.reports.iter().chain(conc.reports.iter()) {
            writeln!(out, "{}", serde_json::to_string(rep)?)?;
        }
        epoch_total += epochs.reports.len() as u64;
        epoch_pass += epochs.reports.iter().filter(|r| r.pass).count() as u64;
        conc_total += conc.reports.len() as u64;
        conc_pass += conc.reports.iter().filter(|r| r.pass).count() as u64;
    }
    writeln!(
        out,
        "{}",
        serde_json::json!({
            "summary": "pass-rates",
            "epoch_invariant": { "pass": epoch_pass, "total": epoch_total },
            "concentration": { "pass": conc_pass, "total": conc_total },
        })
    )?;
    Ok(ExitCode::SUCCESS)
}
