//! MCN-MT test mAP and pseudo-label F-score as the number of tiers grows.
//!
//! ```bash
//! cargo run --release -p mcnmt --example sweep_n -- 5
//! ```

use mcnmt::pipeline::{median, run_seeds, RunConfig};

fn main() -> mcnmt::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let config = RunConfig::default();
    let results = run_seeds(&config, &(0..seeds).collect::<Vec<_>>(), true)?;
    println!("{:>3} {:>10} {:>10}", "n", "mAP", "avg F");
    for n in &config.sweep_ns {
        let points = results.iter().flat_map(|r| r.sweep.iter().filter(|p| p.n == *n));
        let (mut maps, mut fs): (Vec<f64>, Vec<f64>) = points.map(|p| (p.map, p.avg_fscore)).unzip();
        println!("{n:>3} {:>10.4} {:>10.4}", median(&mut maps), median(&mut fs));
    }
    Ok(())
}
