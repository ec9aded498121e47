//! Backpropagated gradients of batch-hard triplet loss against central differences.
//!
//! ```bash
//! cargo run --release -p mcnmt --example gradient_check
//! ```

use mcnmt::encoder::EncoderParams;
use mcnmt::losses::triplet_loss_batch_hard;
use mcnmt::rng::stream;
use rand::Rng as _;

fn main() -> mcnmt::Result<()> {
    let mut rng = stream(0, "gradient-check-example");
    let params = EncoderParams::init(&[8, 32, 32, 16], true, &mut rng)?;
    let inputs: Vec<Vec<f64>> = (0..12)
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let labels: Vec<u32> = (0..12).map(|i| i / 3).collect();
    let margin = 2.0;

    let loss = |p: &EncoderParams| -> mcnmt::Result<f64> {
        Ok(triplet_loss_batch_hard(&p.forward_batch(&inputs)?, &labels, margin)?.loss)
    };
    let result = triplet_loss_batch_hard(&params.forward_batch(&inputs)?, &labels, margin)?;
    let grads: Vec<f64> = params
        .backward(&inputs, &result.upstream_grads)?
        .iter()
        .copied()
        .collect();

    let h = 1e-5;
    println!("loss {:.6}, {} parameters", result.loss, params.param_count());
    println!("{:>6} {:>14} {:>14} {:>10}", "param", "analytic", "numeric", "rel err");
    for k in (0..params.param_count()).step_by(97) {
        let mut plus = params.clone();
        *plus.iter_mut().nth(k).unwrap() += h;
        let mut minus = params.clone();
        *minus.iter_mut().nth(k).unwrap() -= h;
        let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
        let rel = (grads[k] - numeric).abs() / (grads[k].abs() + numeric.abs()).max(1e-12);
        println!("{k:>6} {:>14.8} {numeric:>14.8} {rel:>10.2e}", grads[k]);
    }
    Ok(())
}
