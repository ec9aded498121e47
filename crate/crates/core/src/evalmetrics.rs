//! Retrieval evaluation: mean average precision and CMC curves.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::losses::euclidean;
use crate::synthdata::SyntheticDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSplit {
    pub query: Vec<(Vec<f64>, u32)>,
    pub gallery: Vec<(Vec<f64>, u32)>,
}

impl RetrievalSplit {
    /// Embed the given query and gallery samples of `ds` with `model`.
    pub fn embed(model: &EncoderParams, ds: &SyntheticDataset, query: &[usize], gallery: &[usize]) -> Result<Self> {
        let embed = |idx: &[usize]| -> Result<Vec<(Vec<f64>, u32)>> {
            idx.iter()
                .map(|&i| {
                    let s = &ds.samples[i];
                    Ok((model.forward(&s.vector)?.into_vec(), s.identity))
                })
                .collect()
        };
        Ok(RetrievalSplit {
            query: embed(query)?,
            gallery: embed(gallery)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    /// `cmc[k - 1]` is the fraction of queries with a match in the top `k`.
    pub cmc: Vec<f64>,
    pub fscore: Option<f64>,
    pub evaluated: usize,
    /// Queries whose identity has no gallery match.
    pub excluded: usize,
}

impl MetricsReport {
    /// CMC at rank `k` (1-based), saturating at the end of the curve.
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            len => self.cmc[k.clamp(1, len) - 1],
        }
    }

    pub const CSV_HEADER: [&'static str; 7] = ["mAP", "rank1", "rank5", "rank10", "fscore", "evaluated", "excluded"];

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            format!("{:.6}", self.map),
            format!("{:.6}", self.rank(1)),
            format!("{:.6}", self.rank(5)),
            format!("{:.6}", self.rank(10)),
            self.fscore.map(|f| format!("{f:.6}")).unwrap_or_default(),
            self.evaluated.to_string(),
            self.excluded.to_string(),
        ]
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER)?;
        w.write_record(self.csv_fields())?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Gallery indices in ascending distance from `query`; ties keep gallery order.
pub fn rank_gallery(query: &[f64], gallery: &[(Vec<f64>, u32)]) -> Vec<usize> {
    let dist: Vec<f64> = gallery.iter().map(|(g, _)| euclidean(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order
}

pub fn evaluate(split: &RetrievalSplit) -> Result<MetricsReport> {
    if split.query.is_empty() || split.gallery.is_empty() {
        return Err(Error::shape("query and gallery must both be non-empty"));
    }
    let rankings = split.query.iter().map(|(q, qid)| {
        let order = rank_gallery(q, &split.gallery);
        (*qid, order.into_iter().map(|gi| split.gallery[gi].1).collect())
    });
    Ok(summarize(rankings, split.gallery.len()))
}

/// Every sample queries all the others. Used for model selection, where a
/// small labeled set should yield as many queries as possible.
pub fn evaluate_leave_one_out(samples: &[(Vec<f64>, u32)]) -> Result<MetricsReport> {
    if samples.len() < 2 {
        return Err(Error::shape("leave-one-out evaluation needs at least two samples"));
    }
    let rankings = samples.iter().enumerate().map(|(qi, (q, qid))| {
        let dist: Vec<f64> = samples.iter().map(|(g, _)| euclidean(q, g)).collect();
        let mut order: Vec<usize> = (0..samples.len()).filter(|&gi| gi != qi).collect();
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        (*qid, order.into_iter().map(|gi| samples[gi].1).collect())
    });
    Ok(summarize(rankings, samples.len() - 1))
}

/// Reduce per-query ranked gallery identities to mAP and CMC.
fn summarize(rankings: impl Iterator<Item = (u32, Vec<u32>)>, g: usize) -> MetricsReport {
    let mut hits_at = vec![0usize; g];
    let mut ap_sum = 0.0;
    let mut evaluated = 0;
    let mut excluded = 0;
    for (qid, ranked) in rankings {
        let mut matches = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (rank0, &gid) in ranked.iter().enumerate() {
            if gid == qid {
                matches += 1;
                precision_sum += matches as f64 / (rank0 + 1) as f64;
                first_hit.get_or_insert(rank0);
            }
        }
        let Some(first) = first_hit else {
            excluded += 1;
            continue;
        };
        evaluated += 1;
        ap_sum += precision_sum / matches as f64;
        hits_at[first] += 1;
    }
    let (map, cmc) = if evaluated == 0 {
        (0.0, vec![0.0; g])
    } else {
        let mut acc = 0usize;
        let cmc = hits_at
            .iter()
            .map(|h| {
                acc += h;
                acc as f64 / evaluated as f64
            })
            .collect();
        (ap_sum / evaluated as f64, cmc)
    };
    MetricsReport {
        map,
        cmc,
        fscore: None,
        evaluated,
        excluded,
    }
}
