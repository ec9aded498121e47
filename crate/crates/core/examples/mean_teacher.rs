//! Co-teaching from a fine-tuned model, printing the validation mAP of the
//! live teacher and of its temporal average after every round.
//!
//! ```bash
//! cargo run --release -p mcnmt --example mean_teacher
//! ```

use mcnmt::clustering::partition_granularity;
use mcnmt::pipeline::{adapt_finetune, run_coteaching, train_source, Evaluator, RunConfig};
use mcnmt::synthdata::make_benchmark;

fn main() -> mcnmt::Result<()> {
    let config = RunConfig {
        r: 10,
        ..RunConfig::default()
    };
    let (source, target) = make_benchmark(&config.preset, config.seed)?;
    let view = target.train_view();
    let m_src = train_source(&source, &config)?;
    let partition = partition_granularity(&m_src, view.inputs(), config.n, &config.eps_schedule())?;
    let m_ada = adapt_finetune(&m_src, &partition, &view, &config)?;

    let eval = Evaluator::new(&target);
    let validate = |m: &mcnmt::encoder::EncoderParams| eval.validation_map(m);
    let mut log = Vec::new();
    let outcome = run_coteaching(&m_ada, &partition, &view, &config, true, &validate, &mut log)?;

    println!("alpha {}, entry validation mAP {:.4}", config.alpha, validate(&m_ada)?);
    println!(
        "{:>9} {:>5} {:>6} {:>8} {:>8} {:>8}",
        "paradigm", "round", "active", "selected", "live", "average"
    );
    for l in &log {
        println!(
            "{:>9} {:>5} {:>6} {:>8} {:>8.4} {:>8.4}",
            format!("M1/M{}", l.paradigm),
            l.round,
            l.active_model,
            l.selected_count,
            l.teacher_val_map,
            l.ema_teacher_val_map.unwrap_or(f64::NAN)
        );
    }
    let best = &outcome.best;
    println!(
        "best: paradigm {} round {}, validation {:.4}",
        best.paradigm, best.round, best.score
    );
    println!(
        "test mAP live {:.4}, average {:.4}",
        eval.test(&best.params)?.map,
        eval.test(&best.ema_params)?.map
    );
    Ok(())
}
