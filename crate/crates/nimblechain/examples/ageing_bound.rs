//! Age divergence between correct processes stays within two steps of D.
//!
//! Enumerates every three-process delivery schedule on a D/10 grid, then
//! random continuous schedules.
//!
//! `cargo run --release --example ageing_bound -- [AT] [random schedules]`

use nimblechain::check::{ageing_bound_exhaustive, ageing_bound_random};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let at = args.next().map_or(Ok(4), |s| s.parse())?;
    let random = args.next().map_or(Ok(10_000), |s| s.parse())?;
    let d = 0.96;

    let start = std::time::Instant::now();
    let grid = ageing_bound_exhaustive(at, d);
    println!(
        "grid:   {} schedules, {} successful agings checked, {} violations ({:.2?})",
        grid.schedules,
        grid.agings,
        grid.violations.len(),
        start.elapsed()
    );
    let rand = ageing_bound_random(at, d, random, 7);
    println!("random: {} schedules, {} agings, {} violations", rand.schedules, rand.agings, rand.violations.len());
    for v in grid.violations.iter().chain(&rand.violations).take(5) {
        println!("  {v}");
    }
    Ok(())
}
