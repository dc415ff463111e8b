//! Building a configuration from TOML text and `key=value` overrides, the
//! way the command line does, and the errors invalid settings produce.
//!
//! `cargo run --release --example custom_config`

use nimblechain::{simulate, SimConfig, Summary};

const TOML: &str = r#"
processes = 30
duration = 400

[network]
D = 0.5
base_delay = 0.05

[protocol]
rrs_variant = "Simple"
AT = 6
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = SimConfig::default();
    cfg.apply_toml(TOML)?;
    for kv in ["tx_rate=2", "seed=11"] {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    let (log, report) = simulate(&cfg)?;
    let s = Summary::new(&cfg, &log, &report);
    println!(
        "{} processes, D={}s, AT={}: promise {:.2}s (AT·D = {:.2}s)",
        cfg.n_processes,
        cfg.max_delay,
        cfg.ageing_threshold,
        s.promise_latency.mean,
        cfg.ageing_threshold as f64 * cfg.max_delay
    );

    for bad in ["AT=3", "colour=blue", "D=abc"] {
        let mut c = SimConfig::default();
        println!("{bad:<12} -> {}", c.apply_override(bad).unwrap_err());
    }
    let mut c = SimConfig::default();
    c.apply_override("rrs_variant=Progressive")?;
    c.apply_override("AT=10")?;
    println!("{:<12} -> {}", "AT=10", c.validate().unwrap_err());
    Ok(())
}
