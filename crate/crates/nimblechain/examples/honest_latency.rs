//! Honest network: promise latency versus commit latency.
//!
//! `cargo run --release --example honest_latency -- [seed] [AT]`

use nimblechain::{config::RrsVariant, simulate, SimConfig, Summary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(Ok(1), |s| s.parse())?;
    let mut cfg = SimConfig { seed, ..SimConfig::default() };
    if let Some(at) = args.next() {
        cfg.ageing_threshold = at.parse()?;
        if cfg.ageing_threshold < 2 * (cfg.commit_depth + 1) {
            cfg.rrs_variant = RrsVariant::Simple;
        }
    }
    // Let everything issued in the window reach commit depth.
    cfg.drain = 3.0 * cfg.commit_depth as f64 * cfg.block_interval;

    let start = std::time::Instant::now();
    let (log, report) = simulate(&cfg)?;
    let s = Summary::new(&cfg, &log, &report);
    println!("{} events, {} records in {:.2?}", report.events_processed, log.len(), start.elapsed());
    println!("variant {:?}, AT={}", cfg.rrs_variant, cfg.ageing_threshold);
    println!("transfers: promise {:.2}s  commit {:.2}s", s.transfer_promise_latency.mean, s.transfer_commit_latency.mean);
    println!("all:       promise {:.2}s  commit {:.2}s", s.promise_latency.mean, s.commit_latency.mean);
    println!(
        "speedup {:.1}x, censored promise/commit {}/{}",
        s.transfer_commit_latency.mean / s.transfer_promise_latency.mean,
        s.promise_censored,
        s.commit_censored
    );
    println!("blocks {} main {} mpu {:.3} fairness {:.3}", s.blocks_produced, s.main_chain_length, s.mpu, s.fairness);
    Ok(())
}
