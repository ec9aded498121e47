//! Seeded source/target identity datasets with a controllable domain gap.
//!
//! Every identity owns a center on the unit sphere. Most of its samples are
//! tight Gaussian draws around the center ("easy"); a `hard_fraction` of them
//! use a much larger spread and end up in low-density regions. Target data is
//! additionally pushed through an affine domain transform plus isotropic noise.

use std::path::Path;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::euclidean;
use crate::rng::{derive_seed, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    /// Row-major square matrix.
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl AffineTransform {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        (0..dim).for_each(|i| matrix[i * dim + i] = 1.0);
        AffineTransform {
            matrix,
            offset: vec![0.0; dim],
        }
    }

    /// Haar-ish random rotation (Gram-Schmidt on a Gaussian matrix) plus an
    /// offset of the given length in a random direction.
    pub fn random_rotation(dim: usize, offset_norm: f64, rng: &mut Rng) -> Self {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while rows.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        AffineTransform {
            matrix: rows.concat(),
            offset: unit_vector(dim, rng).into_iter().map(|v| v * offset_norm).collect(),
        }
    }

    /// `random_rotation` followed by per-axis input scaling: column `c` of the
    /// matrix is multiplied by `spread^(2c/(dim-1) - 1)`, so axis gains run
    /// from `1/spread` to `spread`.
    pub fn random_anisotropic(dim: usize, offset_norm: f64, spread: f64, rng: &mut Rng) -> Self {
        let mut t = Self::random_rotation(dim, offset_norm, rng);
        if dim > 1 {
            for r in 0..dim {
                for c in 0..dim {
                    let e = 2.0 * c as f64 / (dim - 1) as f64 - 1.0;
                    t.matrix[r * dim + c] *= spread.powf(e);
                }
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|r| {
                self.matrix[r * d..(r + 1) * d]
                    .iter()
                    .zip(x)
                    .map(|(m, v)| m * v)
                    .sum::<f64>()
                    + self.offset[r]
            })
            .collect()
    }
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

/// How identities are divided into training, validation and test splits.
/// Source datasets put every identity in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_identities: usize,
    pub val_identities: usize,
    /// Per validation/test identity, how many samples become queries; the rest go to the gallery.
    pub queries_per_identity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain: Domain,
    pub identity_count: usize,
    /// First identity id; keeps source and target id spaces apart.
    pub identity_offset: u32,
    pub samples_per_identity: usize,
    pub input_dim: usize,
    pub intra_easy_sigma: f64,
    pub intra_hard_sigma: f64,
    pub hard_fraction: f64,
    /// Centers closer than this are redrawn; 0 disables the constraint.
    pub min_center_separation: f64,
    /// Applied to target samples only; `None` means identity.
    pub domain_transform: Option<AffineTransform>,
    pub noise_sigma: f64,
    pub split: SplitSpec,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        if self.identity_count == 0 {
            return bad("identity_count", "must be positive");
        }
        if self.samples_per_identity == 0 {
            return bad("samples_per_identity", "must be positive");
        }
        if self.input_dim == 0 {
            return bad("input_dim", "must be positive");
        }
        for (name, v) in [
            ("intra_easy_sigma", self.intra_easy_sigma),
            ("intra_hard_sigma", self.intra_hard_sigma),
            ("noise_sigma", self.noise_sigma),
            ("min_center_separation", self.min_center_separation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be finite and non-negative");
            }
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad("hard_fraction", "must lie in [0, 1]");
        }
        if self.hard_fraction > 0.0 && self.intra_hard_sigma <= self.intra_easy_sigma {
            return bad(
                "intra_hard_sigma",
                "must exceed intra_easy_sigma when hard samples are drawn",
            );
        }
        if self.min_center_separation >= 2.0 {
            return bad("min_center_separation", "unit-sphere centers are at most 2 apart");
        }
        if let Some(t) = &self.domain_transform {
            if t.offset.len() != self.input_dim || t.matrix.len() != self.input_dim * self.input_dim {
                return bad("domain_transform", "must be a square map of size input_dim");
            }
        }
        let s = &self.split;
        if s.train_identities + s.val_identities > self.identity_count {
            return bad("split", "train + validation identities exceed identity_count");
        }
        let evaluated = self.identity_count - s.train_identities;
        if evaluated > 0 && (s.queries_per_identity == 0 || s.queries_per_identity >= self.samples_per_identity) {
            return bad(
                "split.queries_per_identity",
                "evaluation identities need at least one query and one gallery sample",
            );
        }
        Ok(())
    }

    pub fn hard_per_identity(&self) -> usize {
        (self.hard_fraction * self.samples_per_identity as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub vector: Vec<f64>,
    pub identity: u32,
    pub hard: bool,
    pub domain: Domain,
}

/// Sample indices per split. Identities never straddle train / val / test.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val_query: Vec<usize>,
    pub val_gallery: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub spec: DomainSpec,
    pub samples: Vec<Sample>,
    pub splits: Splits,
}

/// Input vectors with identities stripped: the only view training code gets of target data.
#[derive(Debug, Clone)]
pub struct UnlabeledView {
    inputs: Vec<Vec<f64>>,
}

impl UnlabeledView {
    pub fn new(inputs: Vec<Vec<f64>>) -> Self {
        UnlabeledView { inputs }
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

impl SyntheticDataset {
    pub fn domain(&self) -> Domain {
        self.spec.domain
    }

    pub fn inputs(&self, indices: &[usize]) -> Vec<Vec<f64>> {
        indices.iter().map(|&i| self.samples[i].vector.clone()).collect()
    }

    pub fn identities(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.samples[i].identity).collect()
    }

    /// Label-free view of the training split.
    pub fn train_view(&self) -> UnlabeledView {
        UnlabeledView::new(self.inputs(&self.splits.train))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ds: SyntheticDataset = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ds.spec.validate()?;
        Ok(ds)
    }
}

fn draw_centers(spec: &DomainSpec) -> Vec<Vec<f64>> {
    let mut rng = stream(spec.seed, "centers");
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.identity_count);
    let mut attempts = 0usize;
    while centers.len() < spec.identity_count {
        let c = unit_vector(spec.input_dim, &mut rng);
        attempts += 1;
        // Give up on the constraint rather than loop forever on impossible packings.
        let relaxed = attempts > 10_000 * spec.identity_count;
        if relaxed || centers.iter().all(|o| euclidean(o, &c) >= spec.min_center_separation) {
            centers.push(c);
        }
    }
    centers
}

fn gaussian_around(center: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    center
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + sigma * z
        })
        .collect()
}

/// Samples of one identity, drawn from a stream derived from the identity index
/// alone so identities can be generated in any order.
fn identity_samples(spec: &DomainSpec, local: usize, center: &[f64]) -> Vec<Sample> {
    let mut rng = stream(spec.seed, &format!("identity/{local}"));
    let n = spec.samples_per_identity;
    let mut hard = vec![false; n];
    for i in index::sample(&mut rng, n, spec.hard_per_identity()) {
        hard[i] = true;
    }
    hard.into_iter()
        .map(|is_hard| {
            let sigma = if is_hard {
                spec.intra_hard_sigma
            } else {
                spec.intra_easy_sigma
            };
            let mut v = gaussian_around(center, sigma, &mut rng);
            if spec.domain == Domain::Target {
                if let Some(t) = &spec.domain_transform {
                    v = t.apply(&v);
                }
                v = gaussian_around(&v, spec.noise_sigma, &mut rng);
            }
            Sample {
                vector: v,
                identity: spec.identity_offset + local as u32,
                hard: is_hard,
                domain: spec.domain,
            }
        })
        .collect()
}

pub fn generate(spec: &DomainSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let centers = draw_centers(spec);
    let per = spec.samples_per_identity;
    let mut samples = Vec::with_capacity(spec.identity_count * per);
    let mut splits = Splits::default();
    let val_end = spec.split.train_identities + spec.split.val_identities;
    for (local, center) in centers.iter().enumerate() {
        let start = samples.len();
        samples.extend(identity_samples(spec, local, center));
        let idx = start..start + per;
        let q = spec.split.queries_per_identity;
        if spec.domain == Domain::Source || local < spec.split.train_identities {
            splits.train.extend(idx);
        } else if local < val_end {
            splits.val_query.extend(start..start + q);
            splits.val_gallery.extend(start + q..start + per);
        } else {
            splits.query.extend(start..start + q);
            splits.gallery.extend(start + q..start + per);
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        samples,
        splits,
    })
}

/// True when every within-identity distance is below every between-identity distance.
pub fn identities_separated(ds: &SyntheticDataset) -> bool {
    let mut max_within = 0.0f64;
    let mut min_between = f64::INFINITY;
    for i in 0..ds.samples.len() {
        for j in (i + 1)..ds.samples.len() {
            let d = euclidean(&ds.samples[i].vector, &ds.samples[j].vector);
            if ds.samples[i].identity == ds.samples[j].identity {
                max_within = max_within.max(d);
            } else {
                min_between = min_between.min(d);
            }
        }
    }
    max_within < min_between
}

pub const PRESETS: [&str; 2] = ["default-shift", "no-shift"];

/// Source and target specs of a named benchmark, seeded from `seed`.
pub fn benchmark_specs(preset: &str, seed: u64) -> Result<(DomainSpec, DomainSpec)> {
    let dim = 8;
    let transform = match preset {
        "default-shift" => Some(AffineTransform::random_anisotropic(
            dim,
            0.5,
            5.0,
            &mut stream(seed, "domain-transform"),
        )),
        "no-shift" => None,
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown benchmark preset '{other}' (known: {})", PRESETS.join(", ")),
            ))
        }
    };
    let noise_sigma = if transform.is_some() { 0.02 } else { 0.0 };
    let source = DomainSpec {
        domain: Domain::Source,
        identity_count: 30,
        identity_offset: 0,
        samples_per_identity: 20,
        input_dim: dim,
        intra_easy_sigma: 0.05,
        intra_hard_sigma: 0.3,
        hard_fraction: 0.3,
        min_center_separation: 0.9,
        domain_transform: None,
        noise_sigma: 0.0,
        split: SplitSpec {
            train_identities: 30,
            val_identities: 0,
            queries_per_identity: 0,
        },
        seed: derive_seed(seed, "source"),
    };
    let target = DomainSpec {
        domain: Domain::Target,
        identity_offset: 1000,
        domain_transform: transform,
        noise_sigma,
        split: SplitSpec {
            train_identities: 15,
            val_identities: 5,
            queries_per_identity: 4,
        },
        seed: derive_seed(seed, "target"),
        ..source.clone()
    };
    Ok((source, target))
}

pub fn make_benchmark(preset: &str, seed: u64) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let (s, t) = benchmark_specs(preset, seed)?;
    Ok((generate(&s)?, generate(&t)?))
}
