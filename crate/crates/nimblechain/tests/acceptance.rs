//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nimblechain::check::{asset_suite, ageing_bound_exhaustive, ageing_bound_random};
use nimblechain::config::{PowerProfile, RrsVariant, Scenario, TOP_POOL_POWERS};
use nimblechain::metrics::Analysis;
use nimblechain::types::{ProcessId, TxId, TxType};
use nimblechain::{simulate, SimConfig, Summary};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn base(seed: u64) -> SimConfig {
    SimConfig {
        n_processes: 100,
        powers: PowerProfile::TopPools,
        block_interval: 20.0,
        max_delay: 0.96,
        commit_depth: 12,
        ageing_threshold: 26,
        rrs_variant: RrsVariant::Progressive,
        tx_rate: 8.0,
        duration: 1000.0,
        seed,
        ..SimConfig::default()
    }
}

/// Drain long enough that everything issued reaches commit depth.
fn full_drain(c: &SimConfig) -> f64 {
    3.0 * c.commit_depth as f64 * c.block_interval
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pooled transfer latencies over `seeds` runs of `cfg`.
fn transfer_latencies(cfg: &SimConfig, seeds: std::ops::RangeInclusive<u64>) -> Result<(f64, f64, usize), String> {
    let (mut promise, mut commit, mut censored) = (Vec::new(), Vec::new(), 0);
    for seed in seeds {
        let c = SimConfig { seed, ..cfg.clone() };
        let (log, report) = simulate(&c).map_err(|e| e.to_string())?;
        let l = Analysis::new(&log, &report.meta).latencies(&report.meta, Some(TxType::Transfer));
        promise.extend(l.promise);
        commit.extend(l.commit);
        censored += l.promise_censored + l.commit_censored;
    }
    Ok((mean(&promise), mean(&commit), censored))
}

/// Promise latency should be AT·D plus the mean delivery delay.
fn latency_oracle(c: &SimConfig) -> f64 {
    c.ageing_threshold as f64 * c.max_delay + (c.base_delay + c.max_delay) / 2.0
}

fn promise_speedup() -> Outcome {
    let mut cfg = base(0);
    cfg.drain = full_drain(&cfg);
    cfg.record_receives = false;
    let (p, c, censored) = transfer_latencies(&cfg, 1..=5)?;
    let ratio = c / p;
    let detail = format!("promise {p:.2}s, commit {c:.2}s, ratio {ratio:.1}x, censored {censored}");
    ensure((24.9..=30.0).contains(&p), || format!("promise latency out of [24.9, 30]: {detail}"))?;
    ensure(c >= 240.0, || format!("commit latency below 240s: {detail}"))?;
    ensure(ratio >= 8.0, || format!("ratio below 8x: {detail}"))?;
    let oracle = latency_oracle(&cfg);
    ensure((p - oracle).abs() < 0.1, || format!("promise {p:.3} vs oracle {oracle:.3}"))?;
    ensure(censored == 0, || format!("{censored} censored pairs"))?;
    Ok(detail)
}

fn fast_path_at4() -> Outcome {
    let mut cfg = base(0);
    cfg.rrs_variant = RrsVariant::Simple;
    cfg.ageing_threshold = 4;
    cfg.drain = full_drain(&cfg);
    cfg.record_receives = false;
    let (p, c, _) = transfer_latencies(&cfg, 1..=5)?;
    let detail = format!("promise {p:.2}s, commit {c:.2}s");
    ensure((3.8..=6.0).contains(&p), || format!("promise latency out of [3.8, 6]: {detail}"))?;
    let oracle = latency_oracle(&cfg);
    ensure((p - oracle).abs() < 0.1, || format!("promise {p:.3} vs oracle {oracle:.3}"))?;
    Ok(detail)
}

fn age_divergence() -> Outcome {
    let d = 0.96;
    let grid = ageing_bound_exhaustive(4, d);
    let random = ageing_bound_random(4, d, 10_000, 11);
    let random26 = ageing_bound_random(26, d, 10_000, 12);
    let violations: Vec<_> = grid.violations.iter().chain(&random.violations).chain(&random26.violations).collect();
    let detail = format!(
        "{} grid + {} random schedules, {} agings checked",
        grid.schedules,
        random.schedules + random26.schedules,
        grid.agings + random.agings + random26.agings
    );
    // The grid covers 3 processes x 11 delays for t, x 121 delay pairs
    // with t' at 11 offsets, up to process symmetry.
    ensure(grid.schedules == 286 + 11 * 302_621, || format!("unexpected grid size {}", grid.schedules))?;
    ensure(grid.agings > 0, || "no successful ageing exercised".into())?;
    ensure(violations.is_empty(), || format!("{} violations, first: {}", violations.len(), violations[0]))?;
    Ok(detail)
}

/// Committed tags per attacker id across correct nodes.
fn conflict_outcomes(a: &Analysis, attacker: ProcessId) -> BTreeMap<TxId, BTreeMap<u32, BTreeSet<ProcessId>>> {
    let mut out: BTreeMap<TxId, BTreeMap<u32, BTreeSet<ProcessId>>> = BTreeMap::new();
    for key in a.issued.keys().filter(|k| k.id.issuer == attacker) {
        out.entry(key.id).or_default();
    }
    for (key, node) in a.commits.keys() {
        if key.id.issuer == attacker {
            out.entry(key.id).or_default().entry(key.tag).or_default().insert(*node);
        }
    }
    out
}

fn conflict_exclusivity() -> Outcome {
    let (mut sets, mut committed, mut both_sent) = (0, 0, 0);
    for seed in 1..=100 {
        let mut cfg = base(seed);
        cfg.scenario = Scenario::DoubleSpend;
        cfg.duration = 300.0;
        cfg.tx_rate = 0.5;
        cfg.drain = full_drain(&cfg);
        cfg.record_receives = false;
        let (log, report) = simulate(&cfg).map_err(|e| format!("seed {seed}: {e}"))?;
        let a = Analysis::new(&log, &report.meta);
        let correct: BTreeSet<ProcessId> = report.meta.correct().collect();
        let attacker = ProcessId(cfg.attack.attacker);
        both_sent += a.issued.keys().filter(|k| k.id.issuer == attacker && k.tag == 1).count();
        for (id, tags) in conflict_outcomes(&a, attacker) {
            sets += 1;
            ensure(tags.len() <= 1, || format!("seed {seed}: {id} has {} committed variants", tags.len()))?;
            if let Some((tag, nodes)) = tags.iter().next() {
                committed += 1;
                ensure(*nodes == correct, || {
                    format!("seed {seed}: {id} tag {tag} committed at {} of {} nodes", nodes.len(), correct.len())
                })?;
            }
        }
    }
    ensure(both_sent > 0, || "no conflicting variants were ever sent".into())?;
    Ok(format!("100 runs, {sets} conflict sets, {committed} committed everywhere, 0 divergent"))
}

fn promised_implies_committed() -> Outcome {
    let scenarios = [
        (Scenario::Honest, RrsVariant::Progressive, 26),
        (Scenario::DoubleSpend, RrsVariant::Progressive, 26),
        (Scenario::Fragmentation, RrsVariant::Progressive, 26),
        (Scenario::Fragmentation, RrsVariant::Simple, 4),
    ];
    let mut promised = 0usize;
    let mut runs = 0;
    for seed in 1..=100u64 {
        let (scenario, variant, at) = scenarios[(seed % 4) as usize];
        let mut cfg = base(seed);
        cfg.scenario = scenario;
        cfg.rrs_variant = variant;
        cfg.ageing_threshold = at;
        cfg.duration = 300.0;
        cfg.tx_rate = 1.0;
        cfg.drain = full_drain(&cfg);
        cfg.record_receives = false;
        let (log, report) = simulate(&cfg).map_err(|e| format!("seed {seed}: {e}"))?;
        let a = Analysis::new(&log, &report.meta);
        for (key, node) in a.promises.keys() {
            promised += 1;
            ensure(a.commits.contains_key(&(*key, *node)), || {
                format!("seed {seed} ({scenario:?}/{variant:?}): {key} promised but never committed at {node}")
            })?;
        }
        runs += 1;
    }
    Ok(format!("{runs} runs over 4 scenarios, {promised} promises, all committed"))
}

fn fragmentation_cfg(seed: u64, variant: RrsVariant, duration: f64) -> SimConfig {
    let mut cfg = base(seed);
    cfg.scenario = Scenario::Fragmentation;
    cfg.rrs_variant = variant;
    cfg.ageing_threshold = match variant {
        RrsVariant::Progressive => 2 * (cfg.commit_depth + 1),
        RrsVariant::Simple => 4,
    };
    cfg.attack.frag_ratio = 0.8;
    cfg.duration = duration;
    cfg.tx_rate = 0.5;
    cfg.drain = full_drain(&cfg);
    cfg.record_receives = false;
    cfg
}

fn healing_bounds() -> Outcome {
    let mut detail = Vec::new();
    let mut simple_over_two = 0;
    for variant in [RrsVariant::Progressive, RrsVariant::Simple] {
        let mut gens = Vec::new();
        for seed in 1..=50 {
            let cfg = fragmentation_cfg(seed, variant, 1000.0);
            assert_eq!(cfg.powers, PowerProfile::TopPools);
            assert_eq!(TOP_POOL_POWERS[cfg.attack.attacker as usize], 0.24);
            let (log, report) = simulate(&cfg).map_err(|e| format!("seed {seed}: {e}"))?;
            let s = Summary::new(&cfg, &log, &report);
            for h in &s.healings {
                let g = h.generations.ok_or_else(|| {
                    format!("{variant:?} seed {seed}: release at {:.1}s never healed", h.release_time)
                })?;
                let bound = match variant {
                    RrsVariant::Progressive => 2,
                    RrsVariant::Simple => cfg.commit_depth as usize,
                };
                ensure(g <= bound, || format!("{variant:?} seed {seed}: {g} generations > {bound}"))?;
                gens.push(g);
                if variant == RrsVariant::Simple && g > 2 {
                    simple_over_two += 1;
                }
            }
        }
        ensure(!gens.is_empty(), || format!("{variant:?}: no attack was released"))?;
        detail.push(format!(
            "{variant:?} {} attacks max {} mean {:.2}",
            gens.len(),
            gens.iter().max().unwrap(),
            gens.iter().sum::<usize>() as f64 / gens.len() as f64
        ));
    }
    ensure(simple_over_two > 0, || "no simple-variant healing exceeded 2 generations".into())?;
    Ok(format!("{}; {simple_over_two} simple healings > 2", detail.join(", ")))
}

struct AttackRuns {
    mpu: BTreeMap<&'static str, Vec<f64>>,
    /// Pooled (reference main-chain blocks, produced blocks) per variant.
    fairness: BTreeMap<&'static str, (usize, usize)>,
    reductions: Vec<f64>,
}

fn attack_runs() -> Result<AttackRuns, String> {
    let mut runs = AttackRuns { mpu: BTreeMap::new(), fairness: BTreeMap::new(), reductions: Vec::new() };
    let duration = 5000.0;
    for seed in 1..=20 {
        for (name, variant) in
            [("baseline", None), ("progressive", Some(RrsVariant::Progressive)), ("simple", Some(RrsVariant::Simple))]
        {
            let mut cfg = fragmentation_cfg(seed, variant.unwrap_or(RrsVariant::Progressive), duration);
            cfg.tx_rate = 0.2;
            cfg.drain = 0.0;
            if variant.is_none() {
                cfg.scenario = Scenario::Honest;
            }
            let (log, report) = simulate(&cfg).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            let a = Analysis::new(&log, &report.meta);
            runs.mpu.entry(name).or_default().push(a.mpu());
            let reference = ProcessId(cfg.reference_miner);
            let mine = a.main_chain.iter().filter(|h| a.blocks.get(h).is_some_and(|b| b.miner == reference)).count();
            let f = runs.fairness.entry(name).or_default();
            f.0 += mine;
            f.1 += a.blocks_produced();
            if variant.is_some() {
                runs.reductions.push(a.fragment_reduction(&report.meta));
            }
        }
    }
    Ok(runs)
}

fn mpu_ordering(runs: &AttackRuns) -> Outcome {
    let m = |k: &str| mean(&runs.mpu[k]);
    let (b, p, s) = (m("baseline"), m("progressive"), m("simple"));
    let worst = runs.reductions.iter().copied().fold(f64::MIN, f64::max);
    let detail = format!("MPU baseline {b:.3} >= progressive {p:.3} >= simple {s:.3}; max reduction {worst:.3}");
    ensure(b >= p && p >= s, || format!("ordering violated: {detail}"))?;
    ensure(runs.reductions.len() == 40, || "expected 40 attack runs".into())?;
    ensure(worst < 0.24, || format!("largest-fragment reduction reached the attacker's stake: {detail}"))?;
    Ok(detail)
}

fn fairness(runs: &AttackRuns) -> Outcome {
    let target = 0.213;
    let mut detail = Vec::new();
    for seed in 1..=3 {
        let mut cfg = base(seed);
        cfg.duration = 40_000.0;
        cfg.tx_rate = 0.02;
        cfg.record_receives = false;
        let (log, report) = simulate(&cfg).map_err(|e| e.to_string())?;
        let a = Analysis::new(&log, &report.meta);
        let f = a.fairness(ProcessId(cfg.reference_miner));
        ensure(a.blocks_produced() >= 1000, || format!("only {} blocks", a.blocks_produced()))?;
        ensure((f - target).abs() <= 0.03, || format!("honest seed {seed}: fairness {f:.4}"))?;
        detail.push(format!("honest {f:.3} ({} blocks)", a.blocks_produced()));
    }
    for name in ["progressive", "simple"] {
        let (mine, all) = runs.fairness[name];
        let f = mine as f64 / all as f64;
        ensure((f - target).abs() <= 0.1 * target, || format!("{name}: pooled fairness {f:.4} over {all} blocks"))?;
        detail.push(format!("{name} {f:.3} ({all} blocks)"));
    }
    Ok(detail.join(", "))
}

fn asset_properties() -> Outcome {
    let r = asset_suite(200, 1000).map_err(|e| e.to_string())?;
    ensure(r.runs == 200, || format!("only {} runs", r.runs))?;
    ensure(r.promised > 0, || "nothing promised".into())?;
    ensure(r.violations.is_empty(), || format!("{} violations, first: {}", r.violations.len(), r.violations[0]))?;
    Ok(format!("{} runs, {} samples, {} promises", r.runs, r.samples, r.promised))
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("nimble-acceptance-{}", std::process::id()));
    let mut checked = 0;
    for (i, scenario) in
        [Scenario::Honest, Scenario::DoubleSpend, Scenario::Fragmentation, Scenario::DViolationStress].into_iter().enumerate()
    {
        let mut cfg = base(40 + i as u64);
        cfg.scenario = scenario;
        cfg.duration = 300.0;
        cfg.tx_rate = 2.0;
        let mut files = Vec::new();
        for run in 0..2 {
            let (log, _) = simulate(&cfg).map_err(|e| e.to_string())?;
            let path = dir.join(format!("{i}-{run}.csv"));
            std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            log.write_csv(std::fs::File::create(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        }
        ensure(files[0] == files[1], || format!("{scenario:?}: events.csv differs between executions"))?;
        ensure(files[0].len() > 1000, || format!("{scenario:?}: suspiciously small log"))?;
        checked += 1;
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(format!("{checked} scenarios byte-identical across two executions"))
}

fn report(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => {
            println!("PASS {name}: {d} [{secs:.1}s]");
            true
        }
        Err(e) => {
            println!("FAIL {name}: {e} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    let mut ok = true;
    let run = |ok: &mut bool, name: &str, f: &dyn Fn() -> Outcome| {
        if wanted(name) {
            *ok &= report(name, f);
        }
    };
    run(&mut ok, "promise-speedup", &promise_speedup);
    run(&mut ok, "fast-path-at4", &fast_path_at4);
    run(&mut ok, "age-divergence-bound", &age_divergence);
    run(&mut ok, "conflict-exclusivity", &conflict_exclusivity);
    run(&mut ok, "promised-implies-committed", &promised_implies_committed);
    run(&mut ok, "healing-bounds", &healing_bounds);
    if wanted("mpu-ordering") || wanted("fairness") {
        match attack_runs() {
            Ok(runs) => {
                run(&mut ok, "mpu-ordering", &|| mpu_ordering(&runs));
                run(&mut ok, "fairness", &|| fairness(&runs));
            }
            Err(e) => {
                println!("FAIL mpu-ordering: {e}");
                println!("FAIL fairness: {e}");
                ok = false;
            }
        }
    }
    run(&mut ok, "asset-properties", &asset_properties);
    run(&mut ok, "determinism", &determinism);
    if !ok {
        std::process::exit(1);
    }
}
