//! Writes a run's event log as CSV, reads it back and recomputes the
//! summary from the file alone.
//!
//! `cargo run --release --example event_log -- [path]`

use nimblechain::metrics::{EventKind, EventLog};
use nimblechain::{simulate, SimConfig, Summary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "events.csv".into());
    let cfg = SimConfig { n_processes: 20, duration: 300.0, tx_rate: 1.0, seed: 5, ..SimConfig::default() };
    let (log, report) = simulate(&cfg)?;
    log.write_csv(std::fs::File::create(&path)?)?;

    let back = EventLog::read_csv(std::fs::File::open(&path)?)?;
    assert_eq!(back.records, log.records);
    for kind in EventKind::ALL {
        println!("{:<14} {:>8}", kind.as_str(), back.of_kind(kind).count());
    }
    let s = Summary::new(&cfg, &back, &report);
    println!("{path}: {} records; promise {:.2}s, mpu {:.3}", back.len(), s.promise_latency.mean, s.mpu);
    Ok(())
}
