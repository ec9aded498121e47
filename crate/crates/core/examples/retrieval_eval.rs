//! mAP and CMC of the source model on the shifted target test split, with and
//! without the shift.
//!
//! ```bash
//! cargo run --release -p mcnmt --example retrieval_eval
//! ```

use mcnmt::evalmetrics::{evaluate, RetrievalSplit};
use mcnmt::pipeline::{train_source, RunConfig};
use mcnmt::synthdata::make_benchmark;

fn main() -> mcnmt::Result<()> {
    let config = RunConfig::default();
    let (source, shifted) = make_benchmark("default-shift", config.seed)?;
    let (_, clean) = make_benchmark("no-shift", config.seed)?;
    let model = train_source(&source, &config)?;

    for (name, target) in [("no-shift", &clean), ("default-shift", &shifted)] {
        let split = RetrievalSplit::embed(&model, target, &target.splits.query, &target.splits.gallery)?;
        let r = evaluate(&split)?;
        println!(
            "{name:>14}: mAP {:.4}  CMC@1 {:.4}  @5 {:.4}  @10 {:.4}  ({} queries, {} gallery)",
            r.map,
            r.rank(1),
            r.rank(5),
            r.rank(10),
            r.evaluated,
            split.gallery.len()
        );
    }
    Ok(())
}
