//! Batch-hard triplet loss and P×K batch sampling.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;

use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_MARGIN: f64 = 0.5;
pub const DEFAULT_P: usize = 16;
pub const DEFAULT_K: usize = 4;

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        self.as_slice()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Symmetric distance matrix, row-major `n × n`.
pub fn pairwise_distances<E: AsRef<[f64]>>(embeddings: &[E]) -> Vec<Vec<f64>> {
    let n = embeddings.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = euclidean(embeddings[i].as_ref(), embeddings[j].as_ref());
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// A P×K batch: `indices` point into the dataset the labels were drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<u32>,
    pub p: usize,
    pub k: usize,
}

impl PkBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draw `p` distinct labels and `k` samples of each. Labels with fewer than `k`
/// samples are drawn with replacement.
pub fn sample_pk_batch(labels: &[u32], p: usize, k: usize, rng: &mut Rng) -> Result<PkBatch> {
    if p == 0 || k == 0 {
        return Err(Error::config("P/K", "must both be at least 1"));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < p {
        return Err(Error::InsufficientIdentities {
            needed: p,
            found: groups.len(),
        });
    }
    let groups: Vec<(u32, Vec<usize>)> = groups.into_iter().collect();
    let mut chosen = index::sample(rng, groups.len(), p).into_vec();
    chosen.sort_unstable();

    let mut batch = PkBatch {
        indices: Vec::with_capacity(p * k),
        labels: Vec::with_capacity(p * k),
        p,
        k,
    };
    for g in chosen {
        let (label, members) = &groups[g];
        if members.len() >= k {
            for j in index::sample(rng, members.len(), k) {
                batch.indices.push(members[j]);
            }
        } else {
            for _ in 0..k {
                batch.indices.push(members[rng.random_range(0..members.len())]);
            }
        }
        batch.labels.extend(std::iter::repeat_n(*label, k));
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLossResult {
    /// Mean of `per_anchor_loss`; 0 when no anchor qualifies.
    pub loss: f64,
    /// Loss of every anchor that has at least one positive, in `anchors` order.
    pub per_anchor_loss: Vec<f64>,
    pub anchors: Vec<usize>,
    /// d loss / d embedding, one row per input embedding.
    pub upstream_grads: Vec<Vec<f64>>,
}

/// Hardest positive / hardest negative for one anchor. Ties go to the lowest index.
fn hardest_pair(dist: &[Vec<f64>], labels: &[u32], a: usize) -> (Option<usize>, Option<usize>) {
    let mut pos: Option<usize> = None;
    let mut neg: Option<usize> = None;
    for j in 0..labels.len() {
        if j == a {
            continue;
        }
        if labels[j] == labels[a] {
            if pos.is_none_or(|p| dist[a][j] > dist[a][p]) {
                pos = Some(j);
            }
        } else if neg.is_none_or(|n| dist[a][j] < dist[a][n]) {
            neg = Some(j);
        }
    }
    (pos, neg)
}

/// `mean_a max(d(a, hardest positive) - d(a, hardest negative) + margin, 0)`.
///
/// Anchors whose label occurs once are skipped and excluded from the mean.
pub fn triplet_loss_batch_hard<E: AsRef<[f64]>>(
    embeddings: &[E],
    labels: &[u32],
    margin: f64,
) -> Result<TripletLossResult> {
    if embeddings.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let first = labels.first().ok_or(Error::NoNegatives)?;
    if labels.iter().all(|l| l == first) {
        return Err(Error::NoNegatives);
    }
    let dim = embeddings[0].as_ref().len();
    if embeddings.iter().any(|e| e.as_ref().len() != dim) {
        return Err(Error::shape("embeddings differ in dimension"));
    }

    let dist = pairwise_distances(embeddings);
    let mut anchors = Vec::new();
    let mut per_anchor_loss = Vec::new();
    let mut active: Vec<(usize, usize, usize)> = Vec::new();
    for a in 0..labels.len() {
        let (Some(p), Some(n)) = hardest_pair(&dist, labels, a) else {
            continue;
        };
        let z = dist[a][p] - dist[a][n] + margin;
        anchors.push(a);
        if z > 0.0 {
            per_anchor_loss.push(z);
            active.push((a, p, n));
        } else {
            per_anchor_loss.push(0.0);
        }
    }

    let mut upstream_grads = vec![vec![0.0; dim]; labels.len()];
    if anchors.is_empty() {
        return Ok(TripletLossResult {
            loss: 0.0,
            per_anchor_loss,
            anchors,
            upstream_grads,
        });
    }
    let scale = 1.0 / anchors.len() as f64;
    for (a, p, n) in active {
        let ea = embeddings[a].as_ref();
        // +d(a,p): pulls a toward p.
        if dist[a][p] > 0.0 {
            let ep = embeddings[p].as_ref();
            for c in 0..dim {
                let g = scale * (ea[c] - ep[c]) / dist[a][p];
                upstream_grads[a][c] += g;
                upstream_grads[p][c] -= g;
            }
        }
        // -d(a,n): pushes a away from n.
        if dist[a][n] > 0.0 {
            let en = embeddings[n].as_ref();
            for c in 0..dim {
                let g = scale * (ea[c] - en[c]) / dist[a][n];
                upstream_grads[a][c] -= g;
                upstream_grads[n][c] += g;
            }
        }
    }
    let loss = per_anchor_loss.iter().sum::<f64>() * scale;
    Ok(TripletLossResult {
        loss,
        per_anchor_loss,
        anchors,
        upstream_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn distance_basics() {
        let d = pairwise_distances(&[vec![0.0, 0.0], vec![3.0, 4.0]]);
        assert_eq!(d[0][1], 5.0);
        assert_eq!(d[1][0], 5.0);
        assert_eq!(d[0][0], 0.0);
        let same = pairwise_distances(&vec![vec![1.0, 2.0]; 3]);
        assert!(same.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn pk_batch_shape_and_determinism() {
        let labels: Vec<u32> = (0..200).map(|i| (i % 50) as u32).collect();
        let b = sample_pk_batch(&labels, 16, 4, &mut stream(1, "pk")).unwrap();
        assert_eq!(b.len(), 64);
        let distinct: std::collections::BTreeSet<_> = b.labels.iter().collect();
        assert_eq!(distinct.len(), 16);
        for (i, l) in b.indices.iter().zip(&b.labels) {
            assert_eq!(labels[*i], *l);
        }

        let ten: Vec<u32> = (0..10).collect();
        let x = sample_pk_batch(&ten, 2, 2, &mut stream(9, "pk")).unwrap();
        let y = sample_pk_batch(&ten, 2, 2, &mut stream(9, "pk")).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn pk_minimal_and_insufficient() {
        let b = sample_pk_batch(&[7], 1, 1, &mut stream(1, "pk")).unwrap();
        assert_eq!(b.indices, vec![0]);
        assert_eq!(b.labels, vec![7]);
        assert!(matches!(
            sample_pk_batch(&[1, 1, 2], 3, 2, &mut stream(1, "pk")),
            Err(Error::InsufficientIdentities { needed: 3, found: 2 })
        ));
    }

    #[test]
    fn hinge_inactive_case() {
        // Label 0 at x=0 and x=1; label 1 at x=3 and x=4: every d_ap = 1, every d_an = 2.
        let e = vec![vec![0.0], vec![1.0], vec![3.0], vec![4.0]];
        let r = triplet_loss_batch_hard(&e, &[0, 0, 1, 1], 0.5).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.upstream_grads.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn hinge_active_case() {
        // Anchor 0: positive at distance 2, negative at distance 1.
        let e = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
        let r = triplet_loss_batch_hard(&e, &[0, 0, 1], 0.5).unwrap();
        assert_eq!(r.anchors, vec![0, 1]);
        assert!((r.per_anchor_loss[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn single_label_batch_has_no_negatives() {
        let e = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            triplet_loss_batch_hard(&e, &[3, 3], 0.5),
            Err(Error::NoNegatives)
        ));
    }

    #[test]
    fn singleton_anchors_are_skipped() {
        let e = vec![vec![0.0], vec![0.1], vec![5.0]];
        let r = triplet_loss_batch_hard(&e, &[0, 0, 1], 0.5).unwrap();
        assert_eq!(r.anchors, vec![0, 1]);
    }

    fn points(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), n)
    }

    proptest! {
        #[test]
        fn loss_is_permutation_invariant(e in points(8, 3), shift in 1usize..8) {
            let labels: Vec<u32> = (0..8).map(|i| (i % 3) as u32).collect();
            let base = triplet_loss_batch_hard(&e, &labels, 0.5).unwrap().loss;
            let perm: Vec<usize> = (0..8).map(|i| (i + shift) % 8).collect();
            let pe: Vec<_> = perm.iter().map(|&i| e[i].clone()).collect();
            let pl: Vec<_> = perm.iter().map(|&i| labels[i]).collect();
            let moved = triplet_loss_batch_hard(&pe, &pl, 0.5).unwrap().loss;
            prop_assert!((base - moved).abs() < 1e-12);
        }

        #[test]
        fn loss_is_rotation_invariant(e in points(6, 2), theta in 0.0f64..std::f64::consts::TAU) {
            let labels = [0, 0, 1, 1, 2, 2];
            let (s, c) = theta.sin_cos();
            let rot: Vec<Vec<f64>> = e.iter().map(|v| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]]).collect();
            let a = triplet_loss_batch_hard(&e, &labels, 0.5).unwrap().loss;
            let b = triplet_loss_batch_hard(&rot, &labels, 0.5).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn per_anchor_losses_are_nonnegative(e in points(10, 4)) {
            let labels: Vec<u32> = (0..10).map(|i| (i % 4) as u32).collect();
            let r = triplet_loss_batch_hard(&e, &labels, 0.5).unwrap();
            prop_assert!(r.per_anchor_loss.iter().all(|l| *l >= 0.0));
            let mean = r.per_anchor_loss.iter().sum::<f64>() / r.per_anchor_loss.len() as f64;
            prop_assert!((mean - r.loss).abs() < 1e-12);
        }
    }
}
