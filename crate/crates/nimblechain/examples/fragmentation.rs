//! Fragmentation attack by a 24% miner against both RRS variants.
//!
//! `cargo run --release --example fragmentation -- [seed] [duration]`

use nimblechain::config::{RrsVariant, Scenario};
use nimblechain::{simulate, SimConfig, Summary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(Ok(1), |s| s.parse())?;
    let duration = args.next().map_or(Ok(2000.0), |s| s.parse())?;
    for (variant, at) in [(RrsVariant::Progressive, 26), (RrsVariant::Simple, 4)] {
        let mut cfg = SimConfig {
            seed,
            duration,
            drain: 600.0,
            tx_rate: 1.0,
            scenario: Scenario::Fragmentation,
            rrs_variant: variant,
            ageing_threshold: at,
            ..SimConfig::default()
        };
        cfg.attack.frag_ratio = 0.8;
        let (log, report) = simulate(&cfg)?;
        let s = Summary::new(&cfg, &log, &report);
        println!("{variant:?} AT={at}: {} attacks", s.healings.len());
        for h in &s.healings {
            match (h.healed_at, h.generations) {
                (Some(t), Some(g)) => println!(
                    "  released {:>7.1}s at height {:>3}: healed after {:>5.1}s, {g} generation(s)",
                    h.release_time,
                    h.height,
                    t - h.release_time
                ),
                _ => println!("  released {:>7.1}s at height {:>3}: not healed", h.release_time, h.height),
            }
        }
        println!(
            "  mpu {:.3}  fairness {:.3}  largest fragment {:.3} of {:.3}  reduction {:.3}",
            s.mpu,
            s.fairness,
            s.avg_largest_fragment,
            report.meta.correct_power(),
            s.fragment_reduction
        );
    }
    Ok(())
}
