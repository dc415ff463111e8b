//! Plain double spends: two variants of one transfer sent to opposite
//! halves of the network with a random offset. Shows that at most one
//! variant ever commits and that every node agrees on which.
//!
//! `cargo run --release --example double_spend -- [seed] [offset]`

use std::collections::BTreeMap;

use nimblechain::config::Scenario;
use nimblechain::metrics::{Analysis, DiscardReason};
use nimblechain::types::{TxId, TxKey};
use nimblechain::{simulate, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(Ok(1), |s| s.parse())?;
    let offset = args.next().map(|s| s.parse()).transpose()?;
    let mut cfg = SimConfig {
        seed,
        duration: 600.0,
        drain: 720.0,
        tx_rate: 1.0,
        scenario: Scenario::DoubleSpend,
        ..SimConfig::default()
    };
    cfg.attack.double_spend_offset = offset;
    let (log, report) = simulate(&cfg)?;
    let a = Analysis::new(&log, &report.meta);
    let attacker = report.meta.byzantine.iter().position(|&b| b).expect("attacker present") as u32;

    let mut outcome: BTreeMap<TxId, BTreeMap<TxKey, (usize, usize, usize)>> = BTreeMap::new();
    for key in a.issued.keys().filter(|k| k.id.issuer.0 == attacker) {
        outcome.entry(key.id).or_default().insert(*key, (0, 0, 0));
    }
    for (key, _) in a.promises.keys() {
        if let Some(e) = outcome.get_mut(&key.id).and_then(|m| m.get_mut(key)) {
            e.0 += 1;
        }
    }
    for (key, _) in a.commits.keys() {
        if let Some(e) = outcome.get_mut(&key.id).and_then(|m| m.get_mut(key)) {
            e.1 += 1;
        }
    }
    for ((key, _), (_, reason)) in &a.discards {
        if *reason == DiscardReason::Conflict {
            if let Some(e) = outcome.get_mut(&key.id).and_then(|m| m.get_mut(key)) {
                e.2 += 1;
            }
        }
    }
    println!("{} double spends, {} correct nodes", outcome.len(), report.meta.correct().count());
    for (id, variants) in &outcome {
        let line: Vec<String> = variants
            .iter()
            .map(|(k, (p, c, d))| format!("tag {}: promised {p:>3} committed {c:>3} discarded {d:>3}", k.tag))
            .collect();
        println!("{id}  {}", line.join(" | "));
        let committed: Vec<_> = variants.iter().filter(|(_, v)| v.1 > 0).collect();
        assert!(committed.len() <= 1, "two variants of {id} committed");
    }
    Ok(())
}
