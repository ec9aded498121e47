//! Multiple co-teaching with temporal-average (mean-teacher) models.
//!
//! One teacher `M_1` is paired in turn with students `M_n, M_{n-1}, .., M_2`.
//! Inside a paradigm, odd rounds let the teacher pick reliable samples from the
//! highest-confidence tier to train the student; even rounds let the student
//! pick reliable samples from its own tier `T_i` to train the teacher. Each
//! network carries an exponential moving average of its parameters, which is
//! used for selection and evaluation when mean-teaching is on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::GranularityPartition;
use crate::encoder::{Embedding, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::euclidean;
use crate::rng::stream;
use crate::synthdata::UnlabeledView;
use crate::train::{train_triplet, TrainSettings};

pub const DEFAULT_ALPHA: f64 = 0.999;
pub const DEFAULT_ROUNDS: usize = 30;
pub const DEFAULT_KEEP_RATE: f64 = 0.8;
pub const DEFAULT_STEPS_PER_ROUND: usize = 10;
pub const DEFAULT_PATIENCE: usize = 10;

/// Temporal average of a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTeacherState {
    pub avg_params: EncoderParams,
    pub alpha: f64,
    pub iteration: u64,
}

impl MeanTeacherState {
    /// The average starts at the live parameters.
    pub fn new(params: &EncoderParams, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1)"));
        }
        Ok(MeanTeacherState {
            avg_params: params.clone(),
            alpha,
            iteration: 0,
        })
    }
}

/// `avg <- alpha * avg + (1 - alpha) * current`, written as
/// `avg + (1 - alpha) * (current - avg)` so `current == avg` is an exact fixed point.
pub fn ema_update(state: &MeanTeacherState, current: &EncoderParams) -> Result<MeanTeacherState> {
    if !state.avg_params.same_shape(current) {
        return Err(Error::shape("EMA and live parameters differ in shape"));
    }
    let w = 1.0 - state.alpha;
    let mut avg = state.avg_params.clone();
    avg.iter_mut().zip(current.iter()).for_each(|(a, c)| *a += w * (c - *a));
    Ok(MeanTeacherState {
        avg_params: avg,
        alpha: state.alpha,
        iteration: state.iteration + 1,
    })
}

/// A live network together with its temporal average.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub params: EncoderParams,
    pub ema: MeanTeacherState,
}

impl Network {
    pub fn new(params: EncoderParams, alpha: f64) -> Result<Self> {
        let ema = MeanTeacherState::new(&params, alpha)?;
        Ok(Network { params, ema })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Positions into the scored tier, ascending.
    pub kept: Vec<usize>,
    /// Per-sample loss used for ranking.
    pub losses: Vec<f64>,
    /// True when distance-to-centroid scoring replaced the triplet score.
    pub fallback: bool,
}

fn centroid<'a>(vectors: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for v in vectors {
        sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        count += 1;
    }
    if count > 0 {
        sum.iter_mut().for_each(|s| *s /= count as f64);
    }
    sum
}

fn label_centroids(embeddings: &[Embedding], labels: &[u32]) -> BTreeMap<u32, Vec<f64>> {
    let dim = embeddings.first().map_or(0, Embedding::dim);
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(*l).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(l, idx)| (l, centroid(idx.iter().map(|&i| embeddings[i].as_slice()), dim)))
        .collect()
}

/// Per-sample triplet score against label centroids: the positive is the
/// anchor's own label centroid, the negative is the nearest other centroid.
/// Returns `(hinge loss, pre-hinge value)` per sample.
pub fn prototype_triplet_scores(embeddings: &[Embedding], labels: &[u32], margin: f64) -> Option<Vec<(f64, f64)>> {
    let centroids = label_centroids(embeddings, labels);
    if centroids.len() < 2 {
        return None;
    }
    Some(
        embeddings
            .iter()
            .zip(labels)
            .map(|(e, l)| {
                let d_pos = euclidean(e.as_slice(), &centroids[l]);
                let d_neg = centroids
                    .iter()
                    .filter(|(other, _)| *other != l)
                    .map(|(_, c)| euclidean(e.as_slice(), c))
                    .fold(f64::INFINITY, f64::min);
                let raw = d_pos - d_neg + margin;
                (raw.max(0.0), raw)
            })
            .collect(),
    )
}

fn keep_count(keep_rate: f64, len: usize) -> usize {
    (((keep_rate * len as f64) - 1e-9).ceil() as usize).clamp(usize::from(len > 0), len)
}

/// Small-loss selection: keep the `ceil(keep_rate * |tier|)` samples whose
/// triplet score under `model` is lowest. Ties fall back to the pre-hinge value
/// and then to the lower position. A tier in which no pseudo label repeats, or
/// with a single label, is scored by distance to the tier centroid instead.
pub fn select_reliable(
    model: &EncoderParams,
    inputs: &[Vec<f64>],
    labels: &[u32],
    keep_rate: f64,
    margin: f64,
) -> Result<Selection> {
    if inputs.is_empty() {
        return Err(Error::shape("cannot select from an empty tier"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::shape("tier inputs and labels differ in length"));
    }
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::config("keep_rate", "must lie in (0, 1]"));
    }
    let embeddings = model.forward_batch(inputs)?;
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    labels.iter().for_each(|l| *counts.entry(*l).or_default() += 1);
    let repeated = counts.values().any(|&c| c >= 2);

    let scored = if repeated {
        prototype_triplet_scores(&embeddings, labels, margin)
    } else {
        None
    };
    let fallback = scored.is_none();
    let scores: Vec<(f64, f64)> = scored.unwrap_or_else(|| {
        let dim = model.embedding_dim();
        let c = centroid(embeddings.iter().map(Embedding::as_slice), dim);
        embeddings
            .iter()
            .map(|e| {
                let d = euclidean(e.as_slice(), &c);
                (d, d)
            })
            .collect()
    });

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .0
            .total_cmp(&scores[b].0)
            .then(scores[a].1.total_cmp(&scores[b].1))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..keep_count(keep_rate, inputs.len())].to_vec();
    kept.sort_unstable();
    Ok(Selection {
        kept,
        losses: scores.into_iter().map(|s| s.0).collect(),
        fallback,
    })
}

/// Label each query with its nearest reference-label centroid under `model`.
pub fn assign_to_prototypes(
    model: &EncoderParams,
    reference_inputs: &[Vec<f64>],
    reference_labels: &[u32],
    queries: &[Vec<f64>],
) -> Result<Vec<u32>> {
    let centroids = label_centroids(&model.forward_batch(reference_inputs)?, reference_labels);
    if centroids.is_empty() {
        return Err(Error::shape("no reference labels to assign from"));
    }
    queries
        .iter()
        .map(|q| {
            let e = model.forward(q)?;
            let mut best: Option<(u32, f64)> = None;
            for (l, c) in &centroids {
                let d = euclidean(e.as_slice(), c);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((*l, d));
                }
            }
            Ok(best.expect("centroids non-empty").0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaCadence {
    /// Update the average after every gradient step.
    Step,
    /// Update once per co-teaching round, after its gradient steps.
    Round,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoteachConfig {
    pub rounds: usize,
    pub steps_per_round: usize,
    pub keep_rate: f64,
    pub train: TrainSettings,
    pub mean_teaching: bool,
    /// Select with the peer's temporal average rather than its live parameters.
    pub select_with_ema: bool,
    pub ema_cadence: EmaCadence,
    pub data: CoteachData,
    /// Stop a paradigm after this many rounds without validation improvement.
    pub patience: usize,
    pub seed: u64,
}

impl CoteachConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::config("r", "need at least one round"));
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return Err(Error::config("keep_rate", "must lie in (0, 1]"));
        }
        if self.patience < 1 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        Ok(())
    }
}

/// What a learner trains on in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoteachData {
    /// Only the instances its peer selected.
    Selected,
    /// The teacher also keeps the whole of `T_1`; students train on their pick only.
    TeacherAnchored,
    /// Every learner also keeps the whole of its own tier.
    OwnTier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub paradigm: usize,
    pub round: usize,
    pub active_model: String,
    pub selected_count: usize,
    pub mean_loss: Option<f64>,
    pub teacher_val_map: f64,
    pub ema_teacher_val_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub params: EncoderParams,
    pub ema_params: EncoderParams,
    pub score: f64,
    pub paradigm: usize,
    pub round: usize,
}

impl Snapshot {
    /// The model used downstream: the temporal average under mean-teaching, else the live one.
    pub fn output(&self, mean_teaching: bool) -> &EncoderParams {
        if mean_teaching {
            &self.ema_params
        } else {
            &self.params
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParadigmState {
    pub teacher: usize,
    pub student: usize,
    pub rounds_run: usize,
    pub max_rounds: usize,
    pub teacher_tier_size: usize,
    pub student_tier_size: usize,
    pub best: Snapshot,
}

fn eval_model(net: &Network, cfg: &CoteachConfig) -> EncoderParams {
    if cfg.mean_teaching {
        net.ema.avg_params.clone()
    } else {
        net.params.clone()
    }
}

fn selector_model(net: &Network, cfg: &CoteachConfig) -> EncoderParams {
    if cfg.mean_teaching && cfg.select_with_ema {
        net.ema.avg_params.clone()
    } else {
        net.params.clone()
    }
}

/// Training candidates of tier `i`: global indices and the labels they train with.
/// The outlier tier has no pseudo labels of its own; its samples take the label
/// of the nearest first-round cluster centroid under `selector`.
fn tier_candidates(
    partition: &GranularityPartition,
    inputs: &UnlabeledView,
    i: usize,
    selector: &EncoderParams,
) -> Result<(Vec<usize>, Vec<u32>)> {
    let members = partition.tier(i).to_vec();
    if members.is_empty() {
        return Ok((members, Vec::new()));
    }
    if i < partition.n {
        let labels = members
            .iter()
            .map(|&g| partition.pseudo_labels[g].expect("labeled tiers carry pseudo labels"))
            .collect();
        return Ok((members, labels));
    }
    let reference = partition.labeled_union();
    if reference.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let ref_inputs: Vec<Vec<f64>> = reference.iter().map(|&g| inputs.inputs()[g].clone()).collect();
    let ref_labels: Vec<u32> = reference
        .iter()
        .map(|&g| partition.first_round_labels[g].expect("union members carry first-round labels"))
        .collect();
    let queries: Vec<Vec<f64>> = members.iter().map(|&g| inputs.inputs()[g].clone()).collect();
    let labels = assign_to_prototypes(selector, &ref_inputs, &ref_labels, &queries)?;
    Ok((members, labels))
}

struct RoundResult {
    selected: usize,
    mean_loss: Option<f64>,
}

/// `selector` picks from `tier`, `learner` trains on the pick.
#[allow(clippy::too_many_arguments)]
fn co_teach_round(
    selector: &EncoderParams,
    learner: &mut Network,
    partition: &GranularityPartition,
    inputs: &UnlabeledView,
    tier: usize,
    own_tier: Option<usize>,
    cfg: &CoteachConfig,
    stream_tag: &str,
) -> Result<RoundResult> {
    let (members, labels) = tier_candidates(partition, inputs, tier, selector)?;
    if members.is_empty() {
        return Ok(RoundResult {
            selected: 0,
            mean_loss: None,
        });
    }
    let tier_inputs: Vec<Vec<f64>> = members.iter().map(|&g| inputs.inputs()[g].clone()).collect();
    let sel = select_reliable(selector, &tier_inputs, &labels, cfg.keep_rate, cfg.train.margin)?;
    let mut train_inputs: Vec<Vec<f64>> = sel.kept.iter().map(|&j| tier_inputs[j].clone()).collect();
    let mut train_labels: Vec<u32> = sel.kept.iter().map(|&j| labels[j]).collect();
    if let Some(own) = own_tier {
        let (m, l) = tier_candidates(partition, inputs, own, &learner.params)?;
        train_inputs.extend(m.iter().map(|&g| inputs.inputs()[g].clone()));
        train_labels.extend(l);
    }

    let mut rng = stream(cfg.seed, stream_tag);
    let mut ema = learner.ema.clone();
    let mut ema_err = None;
    let per_step = cfg.mean_teaching && cfg.ema_cadence == EmaCadence::Step;
    let outcome = train_triplet(
        &learner.params,
        &train_inputs,
        &train_labels,
        cfg.steps_per_round,
        &cfg.train,
        &mut rng,
        |p| {
            if per_step && ema_err.is_none() {
                match ema_update(&ema, p) {
                    Ok(next) => ema = next,
                    Err(e) => ema_err = Some(e),
                }
            }
        },
    )?;
    if let Some(e) = ema_err {
        return Err(e);
    }
    learner.params = outcome.params;
    if cfg.mean_teaching && cfg.ema_cadence == EmaCadence::Round && outcome.steps > 0 {
        ema = ema_update(&ema, &learner.params)?;
    }
    learner.ema = ema;
    Ok(RoundResult {
        selected: sel.kept.len(),
        mean_loss: outcome.mean_loss,
    })
}

/// One teacher/student paradigm over at most `cfg.rounds` rounds.
///
/// The best snapshot is scored on validation by the teacher's evaluation model
/// (its temporal average under mean-teaching) and starts from the teacher as it
/// enters the paradigm.
#[allow(clippy::too_many_arguments)]
pub fn run_paradigm(
    teacher: &mut Network,
    student: &mut Network,
    partition: &GranularityPartition,
    inputs: &UnlabeledView,
    i: usize,
    cfg: &CoteachConfig,
    validate: &dyn Fn(&EncoderParams) -> Result<f64>,
    log: &mut Vec<RoundLog>,
) -> Result<ParadigmState> {
    cfg.validate()?;
    if i < 2 || i > partition.n {
        return Err(Error::config(
            "paradigm",
            format!("student index {i} outside 2..={}", partition.n),
        ));
    }
    if inputs.len() != partition.len() {
        return Err(Error::shape("partition does not cover the target inputs"));
    }
    let entry_model = eval_model(teacher, cfg);
    let mut best = Snapshot {
        params: teacher.params.clone(),
        ema_params: entry_model.clone(),
        score: validate(&entry_model)?,
        paradigm: i,
        round: 0,
    };
    let mut stale = 0;
    let mut rounds_run = 0;
    for round in 1..=cfg.rounds {
        rounds_run = round;
        let tag = format!("coteach/paradigm-{i}/round-{round}");
        let (teacher_own, student_own) = match cfg.data {
            CoteachData::Selected => (None, None),
            CoteachData::TeacherAnchored => (Some(1), None),
            CoteachData::OwnTier => (Some(1), Some(i)),
        };
        let (result, active) = if round % 2 == 0 {
            let selector = selector_model(student, cfg);
            let r = co_teach_round(&selector, teacher, partition, inputs, i, teacher_own, cfg, &tag)?;
            (r, "M1".to_string())
        } else {
            let selector = selector_model(teacher, cfg);
            let r = co_teach_round(&selector, student, partition, inputs, 1, student_own, cfg, &tag)?;
            (r, format!("M{i}"))
        };

        let live_score = validate(&teacher.params)?;
        let ema_score = if cfg.mean_teaching {
            Some(validate(&teacher.ema.avg_params)?)
        } else {
            None
        };
        log.push(RoundLog {
            paradigm: i,
            round,
            active_model: active,
            selected_count: result.selected,
            mean_loss: result.mean_loss,
            teacher_val_map: live_score,
            ema_teacher_val_map: ema_score,
        });

        let score = ema_score.unwrap_or(live_score);
        if score > best.score {
            best = Snapshot {
                params: teacher.params.clone(),
                ema_params: eval_model(teacher, cfg),
                score,
                paradigm: i,
                round,
            };
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(ParadigmState {
        teacher: 1,
        student: i,
        rounds_run,
        max_rounds: cfg.rounds,
        teacher_tier_size: partition.tier(1).len(),
        student_tier_size: partition.tier(i).len(),
        best,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct McnOutcome {
    pub best: Snapshot,
    pub paradigms: Vec<ParadigmState>,
}

/// Callback that rebuilds the partition from the current teacher.
pub type Repartition<'a> = &'a dyn Fn(&EncoderParams) -> Result<GranularityPartition>;

/// Paradigms `i = n, n-1, .., 2` in order; returns the globally best teacher snapshot.
#[allow(clippy::too_many_arguments)]
pub fn run_mcn(
    models: &mut [Network],
    partition: &GranularityPartition,
    inputs: &UnlabeledView,
    cfg: &CoteachConfig,
    validate: &dyn Fn(&EncoderParams) -> Result<f64>,
    repartition: Option<Repartition<'_>>,
    log: &mut Vec<RoundLog>,
) -> Result<McnOutcome> {
    if models.len() != partition.n || models.len() < 2 {
        return Err(Error::config(
            "n",
            format!("{} networks for a partition with {} tiers", models.len(), partition.n),
        ));
    }
    let mut current = partition.clone();
    let mut paradigms = Vec::with_capacity(partition.n - 1);
    let mut best: Option<Snapshot> = None;
    for i in (2..=partition.n).rev() {
        if i != partition.n {
            if let Some(rebuild) = repartition {
                current = rebuild(&eval_model(&models[0], cfg))?;
            }
        }
        let (head, tail) = models.split_at_mut(1);
        let state = run_paradigm(&mut head[0], &mut tail[i - 2], &current, inputs, i, cfg, validate, log)?;
        if best.as_ref().is_none_or(|b| state.best.score > b.score) {
            best = Some(state.best.clone());
        }
        paradigms.push(state);
    }
    Ok(McnOutcome {
        best: best.expect("at least one paradigm ran"),
        paradigms,
    })
}
