//! Command-line front end: config loading, presets, seed sweeps, reports.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::check;
use crate::config::{ConfigError, RrsVariant, Scenario, SimConfig};
use crate::engine::{simulate, SimError, Simulation};
use crate::metrics::{EventLog, LogError, NullSink, Stats, Summary};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Log(#[from] LogError),
    #[error("bad seed list `{0}`")]
    Seeds(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "nimble-sim", version, about = "NimbleChain discrete-event simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate each seed and write events.csv, summary.json and aggregate.json.
    Run(RunArgs),
    /// Run the invariant and property suites and print pass/fail per property.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Honest,
    DoubleSpend,
    /// Fragmentation attack with the configured RRS variant.
    Fragmentation,
    FragmentationSimple,
    FragmentationProgressive,
    DViolationStress,
}

impl Preset {
    pub fn apply(self, cfg: &mut SimConfig) {
        match self {
            Preset::Honest => cfg.scenario = Scenario::Honest,
            Preset::DoubleSpend => cfg.scenario = Scenario::DoubleSpend,
            Preset::Fragmentation => cfg.scenario = Scenario::Fragmentation,
            Preset::FragmentationSimple => {
                cfg.scenario = Scenario::Fragmentation;
                cfg.rrs_variant = RrsVariant::Simple;
                cfg.ageing_threshold = 4;
            }
            Preset::FragmentationProgressive => {
                cfg.scenario = Scenario::Fragmentation;
                cfg.rrs_variant = RrsVariant::Progressive;
                cfg.ageing_threshold = 2 * (cfg.commit_depth + 1);
            }
            Preset::DViolationStress => cfg.scenario = Scenario::DViolationStress,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SpecArgs {
    /// TOML-style file of `key = value` lines; sections are flattened.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scenario: Option<Preset>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Inclusive range `a..b` or comma-separated list.
    #[arg(long, default_value = "1")]
    pub seeds: String,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub processes: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Output directory; NIMBLE_SIM_OUT takes precedence when set.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Randomized asset-property runs.
    #[arg(long, default_value_t = 200)]
    pub property_runs: u64,
    /// Randomized schedules for the age-divergence harness.
    #[arg(long, default_value_t = 10_000)]
    pub schedules: u64,
}

/// Parses `3`, `1..5` (inclusive) or `1,4,9`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Seeds(s.to_string());
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    let seeds: Vec<u64> =
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

impl SpecArgs {
    /// Defaults, then preset, config file, size flags and `--set` overrides.
    pub fn config(&self) -> Result<SimConfig, CliError> {
        let mut cfg = SimConfig::default();
        if let Some(p) = self.scenario {
            p.apply(&mut cfg);
        }
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            cfg.apply_toml(&text)?;
        }
        if let Some(d) = self.duration {
            cfg.duration = d;
        }
        if let Some(n) = self.processes {
            cfg.n_processes = n;
        }
        for kv in &self.set {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
struct Aggregate {
    seeds: Vec<u64>,
    promise_latency_mean: Stats,
    commit_latency_mean: Stats,
    transfer_promise_latency_mean: Stats,
    transfer_commit_latency_mean: Stats,
    mpu: Stats,
    fairness: Stats,
    fragment_reduction: Stats,
    max_healing_generations: Option<usize>,
    violations: usize,
}

impl Aggregate {
    fn new(summaries: &[Summary]) -> Self {
        let stat = |f: &dyn Fn(&Summary) -> f64| Stats::of(&summaries.iter().map(f).collect::<Vec<_>>());
        Aggregate {
            seeds: summaries.iter().map(|s| s.seed).collect(),
            promise_latency_mean: stat(&|s| s.promise_latency.mean),
            commit_latency_mean: stat(&|s| s.commit_latency.mean),
            transfer_promise_latency_mean: stat(&|s| s.transfer_promise_latency.mean),
            transfer_commit_latency_mean: stat(&|s| s.transfer_commit_latency.mean),
            mpu: stat(&|s| s.mpu),
            fairness: stat(&|s| s.fairness),
            fragment_reduction: stat(&|s| s.fragment_reduction),
            max_healing_generations: summaries
                .iter()
                .flat_map(|s| s.healings.iter().filter_map(|h| h.generations))
                .max(),
            violations: summaries.iter().map(|s| s.violations).sum(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn run_seed(base: &SimConfig, seed: u64, out: &Path) -> Result<Summary, CliError> {
    let cfg = SimConfig { seed, ..base.clone() };
    let (log, report) = simulate(&cfg)?;
    let dir = out.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let csv = dir.join("events.csv");
    let f = fs::File::create(&csv).map_err(io_err(&csv))?;
    log.write_csv(BufWriter::new(f))?;
    let summary = Summary::new(&cfg, &log, &report);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn run(args: &RunArgs) -> Result<Vec<Summary>, CliError> {
    let cfg = args.spec.config()?;
    let seeds = parse_seeds(&args.spec.seeds)?;
    let out = std::env::var_os("NIMBLE_SIM_OUT").map_or_else(|| args.out_dir.clone(), PathBuf::from);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let summaries: Vec<Summary> =
        seeds.par_iter().map(|&s| run_seed(&cfg, s, &out)).collect::<Result<_, _>>()?;
    write_json(&out.join("aggregate.json"), &Aggregate::new(&summaries))?;
    for s in &summaries {
        println!(
            "seed {:>4}: promise {:>7.2}s  commit {:>7.2}s  mpu {:.3}  fairness {:.3}  blocks {}",
            s.seed, s.promise_latency.mean, s.commit_latency.mean, s.mpu, s.fairness, s.blocks_produced
        );
    }
    println!("wrote {}", out.display());
    Ok(summaries)
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, violations: &[String], detail: String) -> PropertyOutcome {
    let detail = match violations.first() {
        Some(v) => format!("{detail}; first violation: {v}"),
        None => detail,
    };
    PropertyOutcome { name, passed: violations.is_empty(), detail }
}

/// Node invariants over each seed of the configured scenario.
fn node_invariants(cfg: &SimConfig, seeds: &[u64]) -> Result<PropertyOutcome, CliError> {
    let mut violations = Vec::new();
    for &seed in seeds {
        let cfg = SimConfig { seed, ..cfg.clone() };
        let mut sink = NullSink;
        let mut sim = Simulation::new(&cfg, &mut sink)?;
        let step = cfg.block_interval * 5.0;
        let mut t = 0.0;
        while t < cfg.end_time() {
            t = (t + step).min(cfg.end_time());
            sim.run_until(t)?;
            for n in sim.correct_nodes() {
                if let Err(e) = n.check_invariants(t) {
                    violations.push(format!("seed {seed} {}: {e}", n.pid));
                }
            }
        }
    }
    Ok(outcome("node invariants", &violations, format!("{} runs", seeds.len())))
}

/// Fragmentation healing: at most 2 generations for Progressive, C for Simple.
fn healing_bounds(cfg: &SimConfig, seeds: &[u64]) -> Result<Vec<PropertyOutcome>, CliError> {
    let mut out = Vec::new();
    for preset in [Preset::FragmentationProgressive, Preset::FragmentationSimple] {
        let mut c = cfg.clone();
        preset.apply(&mut c);
        let bound = match c.rrs_variant {
            RrsVariant::Progressive => 2,
            RrsVariant::Simple => c.commit_depth as usize,
        };
        let mut violations = Vec::new();
        let mut attacks = 0;
        for &seed in seeds {
            let c = SimConfig { seed, ..c.clone() };
            let (log, report) = simulate(&c)?;
            let s = Summary::new(&c, &log, &report);
            for h in &s.healings {
                attacks += 1;
                match h.generations {
                    Some(g) if g <= bound => {}
                    Some(g) => violations.push(format!("seed {seed}: {g} generations at height {}", h.height)),
                    // Releases too close to the end of the run never get the chance.
                    None if h.release_time + 20.0 * c.block_interval > c.end_time() => {}
                    None => violations.push(format!("seed {seed}: no healing at height {}", h.height)),
                }
            }
        }
        let name = match c.rrs_variant {
            RrsVariant::Progressive => "healing within 2 generations (progressive)",
            RrsVariant::Simple => "healing within C generations (simple)",
        };
        out.push(outcome(name, &violations, format!("{attacks} attacks")));
    }
    Ok(out)
}

pub fn check(args: &CheckArgs) -> Result<Vec<PropertyOutcome>, CliError> {
    let cfg = args.spec.config()?;
    let seeds = parse_seeds(&args.spec.seeds)?;
    let mut results = Vec::new();

    let bound = check::ageing_bound_suite(4, cfg.max_delay, args.schedules, seeds[0]);
    results.push(outcome(
        "age divergence at most 2",
        &bound.violations,
        format!("{} schedules, {} agings", bound.schedules, bound.agings),
    ));

    let assets = check::asset_suite(args.property_runs, seeds[0])?;
    results.push(outcome(
        "asset transfer properties",
        &assets.violations,
        format!("{} runs, {} samples", assets.runs, assets.samples),
    ));

    results.push(node_invariants(&cfg, &seeds)?);

    let mut frag = cfg.clone();
    frag.tx_rate = frag.tx_rate.min(1.0);
    frag.drain = frag.drain.max(30.0 * frag.block_interval);
    results.extend(healing_bounds(&frag, &seeds)?);

    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(results)
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(a) => run(a).map(|_| true),
        Command::Check(a) => check(a).map(|r| r.iter().all(|o| o.passed)),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Reads back a written events.csv; handy for tooling built on the output.
pub fn read_events(path: &Path) -> Result<EventLog, CliError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    Ok(EventLog::read_csv(std::io::BufReader::new(f))?)
}
