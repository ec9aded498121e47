//! Direct transfer vs. fine-tuning vs. MCN vs. MCN-MT on the default benchmark.
//!
//! ```bash
//! cargo run --release -p mcnmt --example ablation -- 5
//! ```

use mcnmt::pipeline::{median, run_seeds, RunConfig, Variant};

fn main() -> mcnmt::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let config = RunConfig::default();
    let seeds: Vec<u64> = (0..seeds).collect();
    let results = run_seeds(&config, &seeds, false)?;

    println!(
        "{:>6} {:>16} {:>10} {:>8} {:>8}",
        "seed", "variant", "mAP", "rank1", "fscore"
    );
    for res in &results {
        for row in &res.metrics {
            println!(
                "{:>6} {:>16} {:>10.4} {:>8.4} {:>8}",
                row.seed,
                row.variant,
                row.report.map,
                row.report.rank(1),
                row.report.fscore.map(|f| format!("{f:.3}")).unwrap_or_default()
            );
        }
    }
    println!();
    for v in Variant::ALL {
        let mut maps: Vec<f64> = results.iter().filter_map(|r| r.variant_map(v)).collect();
        println!("median mAP {:>16}: {:.4}", v.name(), median(&mut maps));
    }
    Ok(())
}
