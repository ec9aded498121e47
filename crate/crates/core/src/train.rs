//! Mini-batch triplet training on a labeled subset.

use std::collections::BTreeSet;

use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::losses::{sample_pk_batch, triplet_loss_batch_hard};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub p: usize,
    pub k: usize,
    pub margin: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Mean batch loss over the steps taken; `None` when no step could be taken.
    pub mean_loss: Option<f64>,
    pub steps: usize,
}

/// Run `steps` SGD steps of batch-hard triplet loss on P×K batches drawn from
/// `(inputs, labels)`. P shrinks to the number of distinct labels when fewer
/// are available; with fewer than two labels no step is possible and the
/// parameters come back unchanged. `after_step` sees every new parameter set.
pub fn train_triplet(
    params: &EncoderParams,
    inputs: &[Vec<f64>],
    labels: &[u32],
    steps: usize,
    settings: &TrainSettings,
    rng: &mut Rng,
    mut after_step: impl FnMut(&EncoderParams),
) -> Result<TrainOutcome> {
    let distinct = labels.iter().collect::<BTreeSet<_>>().len();
    let p = settings.p.min(distinct);
    if steps == 0 || p < 2 {
        return Ok(TrainOutcome {
            params: params.clone(),
            mean_loss: None,
            steps: 0,
        });
    }
    let mut current = params.clone();
    let mut loss_sum = 0.0;
    for _ in 0..steps {
        let batch = sample_pk_batch(labels, p, settings.k, rng)?;
        let batch_inputs: Vec<&[f64]> = batch.indices.iter().map(|&i| inputs[i].as_slice()).collect();
        let embeddings = current.forward_batch(&batch_inputs)?;
        let loss = triplet_loss_batch_hard(&embeddings, &batch.labels, settings.margin)?;
        loss_sum += loss.loss;
        let grads = current.backward(&batch_inputs, &loss.upstream_grads)?;
        current = current.sgd_step(&grads, settings.learning_rate)?;
        after_step(&current);
    }
    Ok(TrainOutcome {
        params: current,
        mean_loss: Some(loss_sum / steps as f64),
        steps,
    })
}
