//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance runner. Nothing here calls the code path it checks.

#![allow(dead_code)]

use mcnmt::encoder::{EncoderParams, Layer};
use mcnmt::evalmetrics::RetrievalSplit;
use mcnmt::losses::triplet_loss_batch_hard;
use mcnmt::rng::{stream, Rng};
use rand::Rng as _;

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------- gradients

fn loss_at(params: &EncoderParams, inputs: &[Vec<f64>], labels: &[u32], margin: f64) -> f64 {
    let emb = params.forward_batch(inputs).unwrap();
    triplet_loss_batch_hard(&emb, labels, margin).unwrap().loss
}

/// Norm-wise relative error between the analytic gradient of batch-hard triplet
/// loss through the encoder and central finite differences with step `h`.
pub fn gradient_relative_error(seed: u64, dims: &[usize], h: f64) -> f64 {
    let mut rng = stream(seed, "gradcheck");
    let params = EncoderParams::init(dims, true, &mut rng).unwrap();
    let identities = 3;
    let per = 3;
    let inputs: Vec<Vec<f64>> = (0..identities * per)
        .map(|_| (0..dims[0]).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let labels: Vec<u32> = (0..identities * per).map(|i| (i / per) as u32).collect();
    // A large margin keeps every hinge active, away from its kink.
    let margin = 2.0;

    let emb = params.forward_batch(&inputs).unwrap();
    let loss = triplet_loss_batch_hard(&emb, &labels, margin).unwrap();
    let analytic: Vec<f64> = params
        .backward(&inputs, &loss.upstream_grads)
        .unwrap()
        .iter()
        .copied()
        .collect();

    let count = params.param_count();
    let mut numeric = Vec::with_capacity(count);
    for k in 0..count {
        let mut plus = params.clone();
        *plus.iter_mut().nth(k).unwrap() += h;
        let mut minus = params.clone();
        *minus.iter_mut().nth(k).unwrap() -= h;
        numeric
            .push((loss_at(&plus, &inputs, &labels, margin) - loss_at(&minus, &inputs, &labels, margin)) / (2.0 * h));
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

pub const GRADCHECK_ARCHITECTURES: [&[usize]; 3] = [&[4, 3], &[5, 8, 4], &[6, 7, 5, 3]];

// ---------------------------------------------------------------- dbscan

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = x;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

/// Brute-force DBSCAN: explicit neighbor matrix, union-find over core points,
/// border points to their nearest core (lowest index on ties), then clusters
/// smaller than `min_pts` become outliers. Labels are arbitrary.
pub fn oracle_dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            adj[i][j] = dist(&points[i], &points[j]) <= eps;
        }
    }
    let core: Vec<bool> = (0..n)
        .map(|i| adj[i].iter().filter(|&&b| b).count() >= min_pts)
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && adj[i][j] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut label: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if core[i] {
            label[i] = Some(find(&mut parent, i));
        }
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<usize> = None;
        for j in 0..n {
            if core[j] && adj[i][j] {
                let better = match best {
                    None => true,
                    Some(b) => dist(&points[i], &points[j]) < dist(&points[i], &points[b]),
                };
                if better {
                    best = Some(j);
                }
            }
        }
        label[i] = best.map(|j| find(&mut parent, j));
    }
    let mut sizes = std::collections::HashMap::new();
    for l in label.iter().flatten() {
        *sizes.entry(*l).or_insert(0usize) += 1;
    }
    label.into_iter().map(|l| l.filter(|c| sizes[c] >= min_pts)).collect()
}

/// True when both labelings have the same outliers and group the rest identically.
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    for i in 0..a.len() {
        if a[i].is_some() != b[i].is_some() {
            return false;
        }
        for j in 0..a.len() {
            if a[i].is_some() && a[j].is_some() && (a[i] == a[j]) != (b[i] == b[j]) {
                return false;
            }
        }
    }
    true
}

/// Gaussian blobs plus uniform background, with eps and min_pts drawn to
/// produce a mix of cores, borders and outliers.
pub fn random_cluster_instance(seed: u64) -> (Vec<Vec<f64>>, f64, usize) {
    let mut rng = stream(seed, "dbscan-instance");
    let dim = rng.random_range(1..=16);
    let n = rng.random_range(1..=200);
    let blobs = rng.random_range(1..=6);
    let centers: Vec<Vec<f64>> = (0..blobs)
        .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let points = (0..n)
        .map(|_| {
            if rng.random_bool(0.8) {
                let c = &centers[rng.random_range(0..blobs)];
                c.iter().map(|x| x + rng.random_range(-0.5..0.5)).collect()
            } else {
                (0..dim).map(|_| rng.random_range(-6.0..6.0)).collect()
            }
        })
        .collect();
    let eps = rng.random_range(0.2..0.6) * (dim as f64).sqrt();
    let min_pts = rng.random_range(1..=8);
    (points, eps, min_pts)
}

// ---------------------------------------------------------------- retrieval

/// mAP and CMC by direct enumeration: the rank of gallery item `g` is one plus
/// the number of items whose (distance, index) key is smaller.
pub fn oracle_map_cmc(split: &RetrievalSplit) -> (f64, Vec<f64>, usize) {
    let g = split.gallery.len();
    let mut ap_total = 0.0;
    let mut evaluated = 0;
    let mut first_ranks = Vec::new();
    for (q, qid) in &split.query {
        let d: Vec<f64> = split.gallery.iter().map(|(x, _)| dist(q, x)).collect();
        let rank = |i: usize| 1 + (0..g).filter(|&j| d[j] < d[i] || (d[j] == d[i] && j < i)).count();
        let mut relevant: Vec<usize> = (0..g).filter(|&i| split.gallery[i].1 == *qid).collect();
        relevant.sort_by_key(|&i| rank(i));
        if relevant.is_empty() {
            continue;
        }
        evaluated += 1;
        let mut ap = 0.0;
        for &i in &relevant {
            let r = rank(i);
            let hits_up_to = relevant.iter().filter(|&&j| rank(j) <= r).count();
            ap += hits_up_to as f64 / r as f64;
        }
        ap_total += ap / relevant.len() as f64;
        first_ranks.push(relevant.iter().map(|&i| rank(i)).min().unwrap());
    }
    let cmc = (1..=g)
        .map(|k| {
            if evaluated == 0 {
                0.0
            } else {
                first_ranks.iter().filter(|&&r| r <= k).count() as f64 / evaluated as f64
            }
        })
        .collect();
    let map = if evaluated == 0 {
        0.0
    } else {
        ap_total / evaluated as f64
    };
    (map, cmc, evaluated)
}

/// Small random split over a handful of identities on a coarse grid, so
/// distance ties occur.
pub fn random_split(seed: u64) -> RetrievalSplit {
    let mut rng = stream(seed, "retrieval-split");
    let ids = rng.random_range(1..=5u32);
    let dim = rng.random_range(1..=3);
    let point = |rng: &mut Rng| -> (Vec<f64>, u32) {
        let v = (0..dim).map(|_| rng.random_range(0..4) as f64 * 0.5).collect();
        (v, rng.random_range(0..ids))
    };
    let q = rng.random_range(1..=6);
    let g = rng.random_range(1..=12);
    RetrievalSplit {
        query: (0..q).map(|_| point(&mut rng)).collect(),
        gallery: (0..g).map(|_| point(&mut rng)).collect(),
    }
}

// ---------------------------------------------------------------- selection

/// Four orthogonal clusters. Label `c` has four clean samples at cluster `c`
/// and four noisy ones placed 2/1/1 at the other clusters, so every cluster
/// hosts four clean and four foreign samples. Returns an identity encoder,
/// inputs, labels and the ascending indices of the noisy samples.
pub fn planted_noise_fixture() -> (EncoderParams, Vec<Vec<f64>>, Vec<u32>, Vec<usize>) {
    let dim = 4;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut noisy = Vec::new();
    let jitter = |k: usize| 0.01 * ((k * 7919) % 13) as f64 / 13.0;
    for c in 0..dim {
        let clusters = [c, c, c, c, (c + 1) % dim, (c + 1) % dim, (c + 2) % dim, (c + 3) % dim];
        for (j, &at) in clusters.iter().enumerate() {
            let idx = inputs.len();
            let mut v = vec![jitter(idx); dim];
            v[at] = 1.0 + jitter(idx + 1);
            inputs.push(v);
            labels.push(c as u32);
            if j >= 4 {
                noisy.push(idx);
            }
        }
    }
    let mut weights = vec![0.0; dim * dim];
    (0..dim).for_each(|i| weights[i * dim + i] = 1.0);
    let model = EncoderParams::from_layers(
        vec![dim, dim],
        vec![Layer {
            weights,
            bias: vec![0.0; dim],
        }],
        true,
    )
    .unwrap();
    (model, inputs, labels, noisy)
}

/// Mean hinge loss of `a` over every (positive, negative) pair in the tier.
pub fn exhaustive_triplet_loss(emb: &[Vec<f64>], labels: &[u32], a: usize, margin: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..emb.len() {
        if p == a || labels[p] != labels[a] {
            continue;
        }
        for n in 0..emb.len() {
            if labels[n] == labels[a] {
                continue;
            }
            total += (dist(&emb[a], &emb[p]) - dist(&emb[a], &emb[n]) + margin).max(0.0);
            count += 1;
        }
    }
    total / count as f64
}

// ---------------------------------------------------------------- partition

/// Straight-line re-execution of the peeling loop over `dbscan` outputs:
/// round `k` clusters the survivors of round `k - 1`; outliers of round 1 go
/// to `T_n`, of round 2 to `T_{n-1}`, and the last survivors form `T_1`.
pub fn oracle_tiers(embeddings: &[Vec<f64>], eps: &[f64], min_pts: usize) -> Vec<Vec<usize>> {
    let n = eps.len() + 1;
    let mut tiers = vec![Vec::new(); n];
    let mut alive: Vec<usize> = (0..embeddings.len()).collect();
    let mut round = 0;
    while round < eps.len() {
        let pts: Vec<Vec<f64>> = alive.iter().map(|&i| embeddings[i].clone()).collect();
        let labels = oracle_dbscan(&pts, eps[round], min_pts);
        let mut keep = Vec::new();
        for (j, &i) in alive.iter().enumerate() {
            if labels[j].is_some() {
                keep.push(i);
            } else {
                tiers[n - 1 - round].push(i);
            }
        }
        alive = keep;
        round += 1;
    }
    tiers[0] = alive;
    tiers
}
