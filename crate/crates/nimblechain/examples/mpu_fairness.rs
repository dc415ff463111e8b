//! Mining power utilization, fairness and the largest correct fragment,
//! honest baseline against fragmentation attacks on both variants.
//!
//! `cargo run --release --example mpu_fairness -- [runs] [duration]`

use nimblechain::config::{RrsVariant, Scenario};
use nimblechain::metrics::Analysis;
use nimblechain::types::ProcessId;
use nimblechain::{simulate, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let runs: u64 = args.next().map_or(Ok(5), |s| s.parse())?;
    let duration: f64 = args.next().map_or(Ok(3000.0), |s| s.parse())?;
    let setups = [
        ("baseline", Scenario::Honest, RrsVariant::Progressive, 26),
        ("progressive", Scenario::Fragmentation, RrsVariant::Progressive, 26),
        ("simple", Scenario::Fragmentation, RrsVariant::Simple, 4),
    ];
    println!("{:<12} {:>6} {:>9} {:>9} {:>9}", "setup", "mpu", "fairness", "largest", "blocks");
    for (name, scenario, variant, at) in setups {
        let (mut mpu, mut largest, mut mine, mut produced) = (0.0, 0.0, 0, 0);
        for seed in 1..=runs {
            let cfg = SimConfig {
                seed,
                duration,
                scenario,
                rrs_variant: variant,
                ageing_threshold: at,
                tx_rate: 0.2,
                record_receives: false,
                ..SimConfig::default()
            };
            let (log, report) = simulate(&cfg)?;
            let a = Analysis::new(&log, &report.meta);
            mpu += a.mpu();
            largest += a.avg_largest_fragment / report.meta.correct_power();
            let reference = ProcessId(cfg.reference_miner);
            mine += a.main_chain.iter().filter(|h| a.blocks.get(h).is_some_and(|b| b.miner == reference)).count();
            produced += a.blocks_produced();
        }
        println!(
            "{name:<12} {:>6.3} {:>9.3} {:>8.1}% {:>9}",
            mpu / runs as f64,
            mine as f64 / produced as f64,
            100.0 * largest / runs as f64,
            produced
        );
    }
    println!("largest: time-averaged share of correct power held by the biggest group sharing a tip");
    Ok(())
}
