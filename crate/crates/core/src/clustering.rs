//! DBSCAN, confidence-tier peeling, and pseudo-label quality.
//!
//! Tier peeling: the first DBSCAN round runs on every target embedding and
//! its outliers form the lowest-confidence tier. Each later round reclusters
//! the surviving inliers with a tighter radius, and its outliers form the next
//! tier up. Whatever survives the last round is the highest-confidence tier.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::losses::euclidean;

/// Minimum cluster size, also the core-point neighbor threshold.
pub const DEFAULT_MIN_PTS: usize = 4;
/// Radius tuned for raw ResNet pooling features. Not meaningful on unit-norm
/// embeddings; kept as a named preset.
pub const RAW_FEATURE_EPS: f64 = 1.6e-3;
pub const DEFAULT_EPS_RATIO: f64 = 0.75;
pub const DEFAULT_EPS_PERCENTILE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Cluster id per sample; `None` marks an outlier.
    pub assignments: Vec<Option<usize>>,
    pub cluster_count: usize,
    pub eps: f64,
    pub min_pts: usize,
}

impl ClusterResult {
    pub fn outliers(&self) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i].is_none())
            .collect()
    }

    pub fn inliers(&self) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i].is_some())
            .collect()
    }
}

/// DBSCAN with exact neighbor search.
///
/// A point is core when at least `min_pts` points (itself included) lie within
/// `eps`. Clusters are the eps-connected components of core points. A non-core
/// point within `eps` of some core point joins the cluster of its nearest core
/// neighbor (lowest index on ties). Clusters that end up with fewer than
/// `min_pts` members are dissolved into outliers. Cluster ids are numbered by
/// their lowest member index.
pub fn dbscan<E: AsRef<[f64]>>(embeddings: &[E], eps: f64, min_pts: usize) -> Result<ClusterResult> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config("eps", "must be positive and finite"));
    }
    if min_pts == 0 {
        return Err(Error::config("min_pts", "must be at least 1"));
    }
    if embeddings.iter().any(|e| e.as_ref().iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("non-finite embedding entry".into()));
    }
    let n = embeddings.len();
    let neighbors: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            (0..n)
                .filter_map(|j| {
                    let d = euclidean(embeddings[i].as_ref(), embeddings[j].as_ref());
                    (d <= eps).then_some((j, d))
                })
                .collect()
        })
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for seed in 0..n {
        if !is_core[seed] || label[seed].is_some() {
            continue;
        }
        label[seed] = Some(next);
        let mut frontier = vec![seed];
        while let Some(p) = frontier.pop() {
            for &(q, _) in &neighbors[p] {
                if is_core[q] && label[q].is_none() {
                    label[q] = Some(next);
                    frontier.push(q);
                }
            }
        }
        next += 1;
    }

    for i in 0..n {
        if is_core[i] {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for &(j, d) in &neighbors[i] {
            if is_core[j] && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        label[i] = best.and_then(|(j, _)| label[j]);
    }

    Ok(finalize_clusters(label, eps, min_pts))
}

/// Drop undersized clusters and renumber the rest by lowest member index.
pub(crate) fn finalize_clusters(raw: Vec<Option<usize>>, eps: f64, min_pts: usize) -> ClusterResult {
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for c in raw.iter().flatten() {
        *sizes.entry(*c).or_default() += 1;
    }
    let mut renumber: BTreeMap<usize, usize> = BTreeMap::new();
    let mut assignments = vec![None; raw.len()];
    for (i, c) in raw.iter().enumerate() {
        let Some(c) = c else { continue };
        if sizes[c] < min_pts {
            continue;
        }
        let fresh = renumber.len();
        let id = *renumber.entry(*c).or_insert(fresh);
        assignments[i] = Some(id);
    }
    ClusterResult {
        assignments,
        cluster_count: renumber.len(),
        eps,
        min_pts,
    }
}

/// How the first-round radius is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum BaseEps {
    Fixed(f64),
    /// Quantile in (0, 1) of all pairwise distances among the target embeddings.
    Percentile(f64),
}

/// Round `k` (1-based) uses `base * ratio^(k-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsSchedule {
    pub base: BaseEps,
    pub ratio: f64,
    pub min_pts: usize,
}

impl Default for EpsSchedule {
    fn default() -> Self {
        EpsSchedule {
            base: BaseEps::Percentile(DEFAULT_EPS_PERCENTILE),
            ratio: DEFAULT_EPS_RATIO,
            min_pts: DEFAULT_MIN_PTS,
        }
    }
}

impl EpsSchedule {
    pub fn raw_feature_preset() -> Self {
        EpsSchedule {
            base: BaseEps::Fixed(RAW_FEATURE_EPS),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.base {
            BaseEps::Fixed(e) if !(e > 0.0 && e.is_finite()) => {
                return Err(Error::config("eps_base", "fixed eps must be positive"));
            }
            BaseEps::Percentile(q) if !(q > 0.0 && q < 1.0) => {
                return Err(Error::config("eps_percentile", "must lie in (0, 1)"));
            }
            _ => {}
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config("eps_ratio", "must lie in (0, 1]"));
        }
        if self.min_pts == 0 {
            return Err(Error::config("min_pts", "must be at least 1"));
        }
        Ok(())
    }

    /// Concrete radii for `rounds` peeling rounds.
    pub fn resolve<E: AsRef<[f64]>>(&self, embeddings: &[E], rounds: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let base = match self.base {
            BaseEps::Fixed(e) => e,
            BaseEps::Percentile(q) => distance_quantile(embeddings, q)
                .filter(|e| *e > 0.0)
                .ok_or_else(|| Error::Numeric("cannot derive eps: no positive pairwise distance".into()))?,
        };
        Ok((0..rounds).map(|k| base * self.ratio.powi(k as i32)).collect())
    }
}

/// Nearest-rank quantile over all unordered pairwise distances.
pub fn distance_quantile<E: AsRef<[f64]>>(embeddings: &[E], q: f64) -> Option<f64> {
    let n = embeddings.len();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(euclidean(embeddings[i].as_ref(), embeddings[j].as_ref()));
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let rank = ((q * d.len() as f64).ceil() as usize).clamp(1, d.len());
    Some(d[rank - 1])
}

/// Ordered confidence tiers over a target set. `tiers[0]` is the highest-confidence tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityPartition {
    pub n: usize,
    pub eps_schedule: Vec<f64>,
    /// Sample indices per tier, ascending within each tier.
    pub tiers: Vec<Vec<usize>>,
    /// Per sample: cluster id from the last round in which the sample was an
    /// inlier, made unique across rounds. `None` for the outlier tier.
    pub pseudo_labels: Vec<Option<u32>>,
    /// Per sample: cluster id from the first round, the one labeling that covers
    /// every non-outlier tier. `None` for the outlier tier.
    pub first_round_labels: Vec<Option<u32>>,
    /// Clusters found in each round; 0 means the round had nothing to cluster.
    pub round_cluster_counts: Vec<usize>,
}

impl GranularityPartition {
    /// Tier `i`, 1-based as in `T_1..T_n`.
    pub fn tier(&self, i: usize) -> &[usize] {
        &self.tiers[i - 1]
    }

    pub fn len(&self) -> usize {
        self.pseudo_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_labels.is_empty()
    }

    /// Indices of tiers `1..n-1`, i.e. every sample that received a pseudo label.
    pub fn labeled_union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.tiers[..self.n - 1].iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Split target embeddings into `n` tiers with `n - 1` DBSCAN rounds.
pub fn partition_embeddings<E: AsRef<[f64]>>(
    embeddings: &[E],
    n: usize,
    schedule: &EpsSchedule,
) -> Result<GranularityPartition> {
    if n < 2 {
        return Err(Error::config("n", "granularity must be at least 2"));
    }
    let total = embeddings.len();
    let eps_schedule = if total < 2 {
        schedule.validate()?;
        vec![
            match schedule.base {
                BaseEps::Fixed(e) => e,
                BaseEps::Percentile(_) => 1.0,
            };
            n - 1
        ]
    } else {
        schedule.resolve(embeddings, n - 1)?
    };

    let mut tiers: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut pseudo_labels = vec![None; total];
    let mut first_round_labels = vec![None; total];
    let mut round_cluster_counts = Vec::with_capacity(n - 1);
    let mut survivors: Vec<usize> = (0..total).collect();
    let mut offset = 0u32;

    for (round, &eps) in eps_schedule.iter().enumerate() {
        // Round k (0-based) sends its outliers to T_{n-k}, stored at index n-k-1.
        let out_tier = n - round - 1;
        if survivors.is_empty() {
            round_cluster_counts.push(0);
            continue;
        }
        let subset: Vec<&[f64]> = survivors.iter().map(|&i| embeddings[i].as_ref()).collect();
        let clusters = dbscan(&subset, eps, schedule.min_pts)?;
        let mut next = Vec::new();
        for (local, &global) in survivors.iter().enumerate() {
            match clusters.assignments[local] {
                None => tiers[out_tier].push(global),
                Some(c) => {
                    let id = offset + c as u32;
                    pseudo_labels[global] = Some(id);
                    if round == 0 {
                        first_round_labels[global] = Some(c as u32);
                    }
                    next.push(global);
                }
            }
        }
        offset += clusters.cluster_count as u32;
        round_cluster_counts.push(clusters.cluster_count);
        survivors = next;
    }
    tiers[0] = survivors;
    for t in &mut tiers {
        t.sort_unstable();
    }

    Ok(GranularityPartition {
        n,
        eps_schedule,
        tiers,
        pseudo_labels,
        first_round_labels,
        round_cluster_counts,
    })
}

/// Embed `inputs` with `model`, then peel tiers.
pub fn partition_granularity<I: AsRef<[f64]>>(
    model: &EncoderParams,
    inputs: &[I],
    n: usize,
    schedule: &EpsSchedule,
) -> Result<GranularityPartition> {
    let embeddings = model.forward_batch(inputs)?;
    partition_embeddings(&embeddings, n, schedule)
}

fn pairs(count: usize) -> u64 {
    let c = count as u64;
    c * c.saturating_sub(1) / 2
}

/// Pairwise precision/recall F-score of a pseudo labeling against ground truth.
/// Samples without a pseudo label are left out of the pair universe.
pub fn pairwise_fscore(pseudo: &[Option<u32>], truth: &[u32]) -> Result<f64> {
    if pseudo.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} pseudo labels but {} truth labels",
            pseudo.len(),
            truth.len()
        )));
    }
    let mut by_cluster: BTreeMap<u32, usize> = BTreeMap::new();
    let mut by_truth: BTreeMap<u32, usize> = BTreeMap::new();
    let mut by_both: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (p, t) in pseudo.iter().zip(truth) {
        let Some(p) = p else { continue };
        *by_cluster.entry(*p).or_default() += 1;
        *by_truth.entry(*t).or_default() += 1;
        *by_both.entry((*p, *t)).or_default() += 1;
    }
    let same_cluster: u64 = by_cluster.values().map(|&c| pairs(c)).sum();
    let same_truth: u64 = by_truth.values().map(|&c| pairs(c)).sum();
    let both: u64 = by_both.values().map(|&c| pairs(c)).sum();
    if same_cluster == 0 || same_truth == 0 || both == 0 {
        return Ok(0.0);
    }
    let precision = both as f64 / same_cluster as f64;
    let recall = both as f64 / same_truth as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Pairwise F-score of each labeled tier `T_1..T_{n-1}` (`None` when a tier is empty),
/// and their unweighted mean over non-empty tiers.
pub fn tier_fscores(partition: &GranularityPartition, truth: &[u32]) -> Result<(Vec<Option<f64>>, f64)> {
    if truth.len() != partition.len() {
        return Err(Error::shape("truth labels do not cover the partition"));
    }
    let per_tier: Vec<Option<f64>> = partition.tiers[..partition.n - 1]
        .iter()
        .map(|tier| {
            if tier.is_empty() {
                return Ok(None);
            }
            let p: Vec<Option<u32>> = tier.iter().map(|&i| partition.pseudo_labels[i]).collect();
            let t: Vec<u32> = tier.iter().map(|&i| truth[i]).collect();
            pairwise_fscore(&p, &t).map(Some)
        })
        .collect::<Result<_>>()?;
    let present: Vec<f64> = per_tier.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok((per_tier, mean))
}
