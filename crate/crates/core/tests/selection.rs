mod common;

use common::{exhaustive_triplet_loss, planted_noise_fixture};
use mcnmt::coteach::select_reliable;

#[test]
fn planted_noise_is_dropped_at_half_keep_rate() {
    let (model, inputs, labels, noisy) = planted_noise_fixture();
    let sel = select_reliable(&model, &inputs, &labels, 0.5, 0.5).unwrap();
    let dropped: Vec<usize> = (0..inputs.len()).filter(|i| !sel.kept.contains(i)).collect();
    assert_eq!(dropped, noisy);
}

#[test]
fn exhaustive_scoring_ranks_planted_noise_last() {
    let (model, inputs, labels, noisy) = planted_noise_fixture();
    let emb: Vec<Vec<f64>> = model
        .forward_batch(&inputs)
        .unwrap()
        .into_iter()
        .map(|e| e.into_vec())
        .collect();
    let losses: Vec<f64> = (0..emb.len())
        .map(|a| exhaustive_triplet_loss(&emb, &labels, a, 0.5))
        .collect();
    let worst_clean = (0..emb.len())
        .filter(|i| !noisy.contains(i))
        .map(|i| losses[i])
        .fold(f64::MIN, f64::max);
    let best_noisy = noisy.iter().map(|&i| losses[i]).fold(f64::MAX, f64::min);
    assert!(worst_clean < best_noisy, "{worst_clean} vs {best_noisy}");
}

#[test]
fn selection_size_and_subset() {
    let (model, inputs, labels, _) = planted_noise_fixture();
    for keep in [0.1, 0.33, 0.5, 0.8, 1.0] {
        let sel = select_reliable(&model, &inputs, &labels, keep, 0.5).unwrap();
        assert_eq!(sel.kept.len(), (keep * inputs.len() as f64 - 1e-9).ceil() as usize);
        assert!(sel.kept.windows(2).all(|w| w[0] < w[1]));
        assert!(sel.kept.iter().all(|&i| i < inputs.len()));
    }
}
