//! Five-setup phantom comparison at desk scale; prints the summary table.
//!
//! `cargo run --release -p volseg-core --example replicate -- [seeds...]`

use volseg_core::trainer::{desk_config, desk_datasets, compare_setups, RunRecord};

fn main() -> volseg_core::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0, 1, 2] } else { seeds };
    let data = desk_datasets(0)?;
    let t = std::time::Instant::now();
    let mut progress = |name: &str, seed: u64, r: &RunRecord| {
        eprintln!(
            "{name} seed={seed} epochs={} best={} elapsed={:.0}s",
            r.epochs.len(),
            r.best_epoch,
            t.elapsed().as_secs_f64()
        );
    };
    let report = compare_setups(&data, &desk_config(), &seeds, Some(&mut progress))?;
    print!("{}", report.summary_csv());
    for r in &report.rows {
        println!("{} per-seed Dice {:?}", r.name, r.dice_per_seed);
    }
    for (a, b, gap) in report.ordinal_checks() {
        println!("{a} >= {b}: gap {gap:+.4}");
    }
    Ok(())
}
