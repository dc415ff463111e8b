//! Consensus-free asset transfer on top of the promise path: a transfer is
//! spendable by its recipient once promised, long before it commits.
//!
//! `cargo run --release --example asset_transfer`

use nimblechain::asset::AccountId;
use nimblechain::config::{PowerProfile, RrsVariant};
use nimblechain::metrics::NullSink;
use nimblechain::types::ProcessId;
use nimblechain::{SimConfig, Simulation};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SimConfig {
        n_processes: 5,
        powers: PowerProfile::Uniform,
        rrs_variant: RrsVariant::Simple,
        ageing_threshold: 4,
        tx_rate: 0.0,
        genesis_balance: 100,
        duration: 400.0,
        seed: 7,
        ..SimConfig::default()
    };
    let (alice, bob, carol) = (ProcessId(1), ProcessId(2), ProcessId(3));
    let mut sink = NullSink;
    let mut sim = Simulation::new(&cfg, &mut sink)?;

    let t1 = sim.submit_transfer(alice, AccountId::of(bob), 30)?.key();
    println!("t={:>6.2}  {alice} sends 30 to {bob}: {t1}", sim.now());

    // A transfer that would overdraw is refused at the issuer.
    match sim.submit_transfer(alice, AccountId::of(bob), 80) {
        Err(e) => println!("t={:>6.2}  {alice} tries to send 80 more: {e}", sim.now()),
        Ok(t) => println!("unexpectedly issued {}", t.key()),
    }

    sim.run_until(cfg.ageing_threshold as f64 * cfg.max_delay + cfg.max_delay)?;
    let node = sim.node(bob).expect("correct");
    println!(
        "t={:>6.2}  {bob} sees {t1} promised; balance {} (chain height {})",
        sim.now(),
        node.read(AccountId::of(bob)),
        node.chain().height()
    );

    // Bob spends the promised funds straight away; the new transfer depends on t1.
    let tx = sim.submit_transfer(bob, AccountId::of(carol), 120)?;
    let t2 = tx.key();
    let deps: Vec<String> = tx.deps.iter().map(ToString::to_string).collect();
    println!("t={:>6.2}  {bob} sends 120 to {carol}: {t2}, deps [{}]", sim.now(), deps.join(", "));

    sim.run_to_end()?;
    for p in [alice, bob, carol] {
        let n = sim.node(p).expect("correct");
        println!(
            "end     {p}: balance {:>3}, committed {} txs, supply {}",
            n.read(AccountId::of(p)),
            n.committed_count(),
            n.assets().total()
        );
    }
    let n = sim.node(carol).expect("correct");
    for key in [t1, t2] {
        let (_, at, block) = n.committed(key.id).expect("committed by the end");
        println!("        {key} committed at t={at:.1} in block {block}");
    }
    Ok(())
}
