//! Peel the target train set into confidence tiers with recursive DBSCAN and
//! score each tier's pseudo labels against the hidden identities.
//!
//! ```bash
//! cargo run --release -p mcnmt --example dbscan_tiers -- 4
//! ```

use mcnmt::clustering::partition_granularity;
use mcnmt::pipeline::{train_source, Evaluator, RunConfig};
use mcnmt::synthdata::make_benchmark;

fn main() -> mcnmt::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let config = RunConfig {
        n,
        ..RunConfig::default()
    };
    let (source, target) = make_benchmark(&config.preset, config.seed)?;
    let model = train_source(&source, &config)?;
    let view = target.train_view();
    let partition = partition_granularity(&model, view.inputs(), n, &config.eps_schedule())?;
    let (tier_f, avg_f) = Evaluator::new(&target).partition_fscore(&partition)?;

    println!(
        "eps per round: {:?}",
        partition
            .eps_schedule
            .iter()
            .map(|e| format!("{e:.4}"))
            .collect::<Vec<_>>()
    );
    println!("clusters per round: {:?}", partition.round_cluster_counts);
    for (i, tier) in partition.tiers.iter().enumerate() {
        let f = tier_f
            .get(i)
            .copied()
            .flatten()
            .map(|f| format!("{f:.3}"))
            .unwrap_or_else(|| "-".into());
        println!("T_{}: {:>4} samples, pairwise F {f}", i + 1, tier.len());
    }
    println!("average F {avg_f:.3}");
    Ok(())
}
