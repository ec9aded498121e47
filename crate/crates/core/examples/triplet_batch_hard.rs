//! Train an encoder on labeled source data with P×K batch-hard triplet loss.
//!
//! ```bash
//! cargo run --release -p mcnmt --example triplet_batch_hard
//! ```

use mcnmt::encoder::EncoderParams;
use mcnmt::losses::{sample_pk_batch, triplet_loss_batch_hard};
use mcnmt::pipeline::RunConfig;
use mcnmt::rng::stream;
use mcnmt::synthdata::make_benchmark;

fn main() -> mcnmt::Result<()> {
    let config = RunConfig::default();
    let (source, _) = make_benchmark(&config.preset, 0)?;
    let idx = &source.splits.train;
    let inputs = source.inputs(idx);
    let labels = source.identities(idx);

    let mut rng = stream(0, "triplet-example");
    let mut params = EncoderParams::init(&config.layer_dims(source.spec.input_dim), true, &mut rng)?;
    for step in 0..=300 {
        let batch = sample_pk_batch(&labels, config.p, config.k, &mut rng)?;
        let batch_inputs: Vec<Vec<f64>> = batch.indices.iter().map(|&i| inputs[i].clone()).collect();
        let loss = triplet_loss_batch_hard(&params.forward_batch(&batch_inputs)?, &batch.labels, config.margin)?;
        if step % 50 == 0 {
            let active = loss.per_anchor_loss.iter().filter(|l| **l > 0.0).count();
            println!(
                "step {step:>3}: loss {:.4}, {active}/{} anchors active",
                loss.loss,
                loss.anchors.len()
            );
        }
        let grads = params.backward(&batch_inputs, &loss.upstream_grads)?;
        params = params.sgd_step(&grads, config.learning_rate)?;
    }
    Ok(())
}
