//! Delivery delays beyond D: the ageing guarantees no longer hold, and the
//! run records each breach instead of aborting.
//!
//! `cargo run --release --example stress_delays -- [delay factor]`

use nimblechain::config::{RrsVariant, Scenario};
use nimblechain::{simulate, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let factor = std::env::args().nth(1).map_or(Ok(3.0), |s| s.parse())?;
    let cfg = SimConfig {
        scenario: Scenario::DViolationStress,
        stress_delay_factor: factor,
        rrs_variant: RrsVariant::Simple,
        ageing_threshold: 4,
        duration: 600.0,
        tx_rate: 2.0,
        seed: 3,
        ..SimConfig::default()
    };
    let (_, report) = simulate(&cfg)?;
    println!(
        "delays up to {:.2}s (D = {}s): {} recorded violations",
        cfg.max_delay_in_run(),
        cfg.max_delay,
        report.violations.len()
    );
    for v in report.violations.iter().take(5) {
        println!("  t={:>7.2}  event {:>8}  {}", v.time, v.event_index, v.detail);
    }
    Ok(())
}
