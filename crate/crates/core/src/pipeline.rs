//! End-to-end adaptation driver and the ablation runner.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{partition_granularity, tier_fscores, BaseEps, EpsSchedule, GranularityPartition};
use crate::coteach::{self, run_mcn, CoteachConfig, CoteachData, EmaCadence, McnOutcome, Network, RoundLog};
use crate::encoder::{EncoderParams, DEFAULT_EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, evaluate_leave_one_out, MetricsReport, RetrievalSplit};
use crate::losses::{DEFAULT_K, DEFAULT_MARGIN, DEFAULT_P};
use crate::rng::{derive_seed, stream};
use crate::synthdata::{make_benchmark, SyntheticDataset, UnlabeledView, PRESETS};
use crate::train::{train_triplet, TrainSettings};

/// Every knob of a run. Loaded from flat JSON; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    /// Granularity: number of confidence tiers and of networks.
    pub n: usize,
    /// Maximum co-teaching rounds per paradigm.
    pub r: usize,
    pub alpha: f64,
    pub margin: f64,
    pub p: usize,
    pub k: usize,
    pub keep_rate: f64,
    /// Fixed first-round DBSCAN radius; `None` derives it from `eps_percentile`.
    pub eps_base: Option<f64>,
    pub eps_percentile: f64,
    pub eps_ratio: f64,
    pub min_pts: usize,
    pub learning_rate: f64,
    /// Co-teaching step size; `None` reuses `learning_rate`.
    pub coteach_learning_rate: Option<f64>,
    pub source_steps: usize,
    pub finetune_steps: usize,
    pub steps_per_round: usize,
    pub patience: usize,
    pub mean_teaching: bool,
    pub select_with_ema: bool,
    pub ema_cadence: EmaCadence,
    pub coteach_data: CoteachData,
    pub repartition: bool,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    /// Granularities visited by the n-sweep.
    pub sweep_ns: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "default-shift".into(),
            seed: 0,
            n: 3,
            r: coteach::DEFAULT_ROUNDS,
            alpha: 0.99,
            margin: DEFAULT_MARGIN,
            p: DEFAULT_P,
            k: DEFAULT_K,
            keep_rate: coteach::DEFAULT_KEEP_RATE,
            eps_base: None,
            eps_percentile: 0.02,
            eps_ratio: crate::clustering::DEFAULT_EPS_RATIO,
            min_pts: crate::clustering::DEFAULT_MIN_PTS,
            learning_rate: 0.02,
            coteach_learning_rate: Some(0.1),
            source_steps: 300,
            finetune_steps: 200,
            steps_per_round: coteach::DEFAULT_STEPS_PER_ROUND,
            patience: coteach::DEFAULT_PATIENCE,
            mean_teaching: true,
            select_with_ema: true,
            ema_cadence: EmaCadence::Step,
            coteach_data: CoteachData::TeacherAnchored,
            repartition: false,
            hidden_dims: vec![16],
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            sweep_ns: vec![2, 3, 4, 5, 6],
        }
    }
}

impl RunConfig {
    /// Checks fields in declaration order and reports the first violation.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: &str| Err(Error::config(field, msg));
        if !PRESETS.contains(&self.preset.as_str()) {
            return fail("preset", &format!("unknown preset (known: {})", PRESETS.join(", ")));
        }
        if self.n < 2 {
            return fail("n", "must be at least 2");
        }
        if self.r < 1 {
            return fail("r", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return fail("alpha", "must lie in [0, 1)");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return fail("margin", "must be finite and non-negative");
        }
        if self.p < 2 {
            return fail("p", "need at least 2 identities per batch");
        }
        if self.k < 2 {
            return fail("k", "need at least 2 instances per identity");
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return fail("keep_rate", "must lie in (0, 1]");
        }
        if let Some(e) = self.eps_base {
            if !(e > 0.0 && e.is_finite()) {
                return fail("eps_base", "must be positive");
            }
        }
        if !(self.eps_percentile > 0.0 && self.eps_percentile < 1.0) {
            return fail("eps_percentile", "must lie in (0, 1)");
        }
        if !(self.eps_ratio > 0.0 && self.eps_ratio <= 1.0) {
            return fail("eps_ratio", "must lie in (0, 1]");
        }
        if self.min_pts < 1 {
            return fail("min_pts", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", "must be positive");
        }
        if let Some(lr) = self.coteach_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail("coteach_learning_rate", "must be positive");
            }
        }
        if self.patience < 1 {
            return fail("patience", "must be at least 1");
        }
        if self.hidden_dims.contains(&0) {
            return fail("hidden_dims", "dims must be positive");
        }
        if self.embedding_dim == 0 {
            return fail("embedding_dim", "must be positive");
        }
        if self.sweep_ns.iter().any(|&n| n < 2) {
            return fail("sweep_ns", "every granularity must be at least 2");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn eps_schedule(&self) -> EpsSchedule {
        EpsSchedule {
            base: match self.eps_base {
                Some(e) => BaseEps::Fixed(e),
                None => BaseEps::Percentile(self.eps_percentile),
            },
            ratio: self.eps_ratio,
            min_pts: self.min_pts,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            p: self.p,
            k: self.k,
            margin: self.margin,
            learning_rate: self.learning_rate,
        }
    }

    pub fn coteach_config(&self, mean_teaching: bool) -> CoteachConfig {
        CoteachConfig {
            rounds: self.r,
            steps_per_round: self.steps_per_round,
            keep_rate: self.keep_rate,
            train: TrainSettings {
                learning_rate: self.coteach_learning_rate.unwrap_or(self.learning_rate),
                ..self.train_settings()
            },
            mean_teaching,
            select_with_ema: self.select_with_ema,
            ema_cadence: self.ema_cadence,
            data: self.coteach_data,
            patience: self.patience,
            seed: derive_seed(self.seed, "coteach"),
        }
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }
}

/// Supervised triplet training on the labeled source set, from a seeded init.
pub fn train_source(source: &SyntheticDataset, config: &RunConfig) -> Result<EncoderParams> {
    let idx = &source.splits.train;
    let labels = source.identities(idx);
    let found = labels.iter().collect::<BTreeSet<_>>().len();
    if found < 2 {
        return Err(Error::InsufficientIdentities { needed: 2, found });
    }
    let init = EncoderParams::init(
        &config.layer_dims(source.spec.input_dim),
        true,
        &mut stream(config.seed, "init"),
    )?;
    let out = train_triplet(
        &init,
        &source.inputs(idx),
        &labels,
        config.source_steps,
        &config.train_settings(),
        &mut stream(config.seed, "source-batches"),
        |_| {},
    )?;
    Ok(out.params)
}

/// Fine-tune on tiers `T_1..T_{n-1}` with their shared first-round cluster labels.
/// The outlier tier `T_n` is left out.
pub fn adapt_finetune(
    m_src: &EncoderParams,
    partition: &GranularityPartition,
    target: &UnlabeledView,
    config: &RunConfig,
) -> Result<EncoderParams> {
    if target.len() != partition.len() {
        return Err(Error::shape("partition does not cover the target inputs"));
    }
    let union = partition.labeled_union();
    if union.is_empty() {
        log_warn("fine-tune: no pseudo-labeled target samples; keeping the source model");
        return Ok(m_src.clone());
    }
    let inputs: Vec<Vec<f64>> = union.iter().map(|&g| target.inputs()[g].clone()).collect();
    let labels: Vec<u32> = union
        .iter()
        .map(|&g| partition.first_round_labels[g].expect("union members are labeled"))
        .collect();
    let out = train_triplet(
        m_src,
        &inputs,
        &labels,
        config.finetune_steps,
        &config.train_settings(),
        &mut stream(config.seed, &format!("finetune-batches/n{}", partition.n)),
        |_| {},
    )?;
    Ok(out.params)
}

fn log_warn(msg: &str) {
    eprintln!("warning: {msg}");
}

/// Labeled evaluation data. Only evaluation code holds this; training receives
/// an [`UnlabeledView`] of the target train split.
pub struct Evaluator<'a> {
    target: &'a SyntheticDataset,
}

impl<'a> Evaluator<'a> {
    pub fn new(target: &'a SyntheticDataset) -> Self {
        Evaluator { target }
    }

    /// Leave-one-out mAP over every validation sample.
    pub fn validation_map(&self, model: &EncoderParams) -> Result<f64> {
        let s = &self.target.splits;
        let split = RetrievalSplit::embed(model, self.target, &s.val_query, &s.val_gallery)?;
        let all: Vec<_> = split.query.into_iter().chain(split.gallery).collect();
        Ok(evaluate_leave_one_out(&all)?.map)
    }

    pub fn test(&self, model: &EncoderParams) -> Result<MetricsReport> {
        let s = &self.target.splits;
        evaluate(&RetrievalSplit::embed(model, self.target, &s.query, &s.gallery)?)
    }

    /// Average tier F-score of a partition of the target train split.
    pub fn partition_fscore(&self, partition: &GranularityPartition) -> Result<(Vec<Option<f64>>, f64)> {
        tier_fscores(partition, &self.target.identities(&self.target.splits.train))
    }
}

/// Run co-teaching from `m_ada` with `n` copies of it.
pub fn run_coteaching(
    m_ada: &EncoderParams,
    partition: &GranularityPartition,
    target_train: &UnlabeledView,
    config: &RunConfig,
    mean_teaching: bool,
    validate: &dyn Fn(&EncoderParams) -> Result<f64>,
    log: &mut Vec<RoundLog>,
) -> Result<McnOutcome> {
    let mut models: Vec<Network> = (0..partition.n)
        .map(|_| Network::new(m_ada.clone(), config.alpha))
        .collect::<Result<_>>()?;
    let schedule = config.eps_schedule();
    let rebuild =
        |teacher: &EncoderParams| partition_granularity(teacher, target_train.inputs(), partition.n, &schedule);
    let repartition: Option<coteach::Repartition<'_>> = if config.repartition { Some(&rebuild) } else { None };
    run_mcn(
        &mut models,
        partition,
        target_train,
        &config.coteach_config(mean_teaching),
        validate,
        repartition,
        log,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    DirectTransfer,
    FineTune,
    Mcn,
    McnMt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::DirectTransfer, Variant::FineTune, Variant::Mcn, Variant::McnMt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DirectTransfer => "direct-transfer",
            Variant::FineTune => "fine-tune",
            Variant::Mcn => "mcn",
            Variant::McnMt => "mcn-mt",
        }
    }
}

/// One evaluation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub n: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub n: usize,
    #[serde(flatten)]
    pub log: RoundLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub map: f64,
    pub rank1: f64,
    pub avg_fscore: f64,
    pub tier_fscores: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: Vec<MetricRow>,
    pub sweep: Vec<SweepPoint>,
    pub rounds: Vec<RoundRow>,
    pub partition_fscore: f64,
    pub partition_tier_fscores: Vec<Option<f64>>,
}

impl ExperimentResult {
    pub fn variant_map(&self, variant: Variant) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.variant == variant.name() && m.n == self.config.n)
            .map(|m| m.report.map)
    }
}

/// Everything shared by the variants of one seed.
struct Stage<'a> {
    target: &'a SyntheticDataset,
    view: UnlabeledView,
    m_src: EncoderParams,
}

fn adapt_and_coteach(
    stage: &Stage<'_>,
    config: &RunConfig,
    n: usize,
    variants: &[Variant],
    hash: &str,
    metrics: &mut Vec<MetricRow>,
    rounds: &mut Vec<RoundRow>,
) -> Result<(GranularityPartition, f64, Vec<Option<f64>>)> {
    let eval = Evaluator::new(stage.target);
    let partition = partition_granularity(&stage.m_src, stage.view.inputs(), n, &config.eps_schedule())?;
    let (tiers_f, avg_f) = eval.partition_fscore(&partition)?;
    let m_ada = adapt_finetune(&stage.m_src, &partition, &stage.view, config)?;
    let row = |variant: Variant, mut report: MetricsReport| {
        report.fscore = Some(avg_f);
        MetricRow {
            config_hash: hash.to_string(),
            seed: config.seed,
            variant: variant.name().to_string(),
            n,
            report,
        }
    };
    if variants.contains(&Variant::FineTune) {
        metrics.push(row(Variant::FineTune, eval.test(&m_ada)?));
    }
    let validate = |m: &EncoderParams| eval.validation_map(m);
    for (variant, mt) in [(Variant::Mcn, false), (Variant::McnMt, true)] {
        if !variants.contains(&variant) {
            continue;
        }
        let mut log = Vec::new();
        let outcome = run_coteaching(&m_ada, &partition, &stage.view, config, mt, &validate, &mut log)?;
        metrics.push(row(variant, eval.test(outcome.best.output(mt))?));
        rounds.extend(log.into_iter().map(|l| RoundRow {
            config_hash: hash.to_string(),
            seed: config.seed,
            variant: variant.name().to_string(),
            n,
            log: l,
        }));
    }
    Ok((partition, avg_f, tiers_f))
}

/// Direct transfer, fine-tuning, MCN and MCN-MT on one seeded benchmark, plus
/// the n-sweep when `with_sweep` is set.
pub fn run_experiment(config: &RunConfig, with_sweep: bool) -> Result<ExperimentResult> {
    config.validate()?;
    let (source, target) = make_benchmark(&config.preset, config.seed)?;
    run_experiment_on(config, &source, &target, with_sweep)
}

/// [`run_experiment`] on explicit datasets; `config.preset` is ignored.
pub fn run_experiment_on(
    config: &RunConfig,
    source: &SyntheticDataset,
    target: &SyntheticDataset,
    with_sweep: bool,
) -> Result<ExperimentResult> {
    config.validate()?;
    let hash = config.hash();
    let stage = Stage {
        target,
        view: target.train_view(),
        m_src: train_source(source, config)?,
    };
    let eval = Evaluator::new(target);
    let mut metrics = vec![MetricRow {
        config_hash: hash.clone(),
        seed: config.seed,
        variant: Variant::DirectTransfer.name().into(),
        n: config.n,
        report: eval.test(&stage.m_src)?,
    }];
    let mut rounds = Vec::new();
    let (_, partition_fscore, partition_tier_fscores) = adapt_and_coteach(
        &stage,
        config,
        config.n,
        &[Variant::FineTune, Variant::Mcn, Variant::McnMt],
        &hash,
        &mut metrics,
        &mut rounds,
    )?;

    let mut sweep = Vec::new();
    if with_sweep {
        for &n in &config.sweep_ns {
            let (report, avg_fscore, tier_fscores) = if n == config.n {
                let row = metrics
                    .iter()
                    .find(|row| row.variant == Variant::McnMt.name() && row.n == n)
                    .expect("main run produced an mcn-mt row");
                (row.report.clone(), partition_fscore, partition_tier_fscores.clone())
            } else {
                let mut m = Vec::new();
                let (_, f, t) = adapt_and_coteach(&stage, config, n, &[Variant::McnMt], &hash, &mut m, &mut rounds)?;
                let report = m[0].report.clone();
                metrics.extend(m);
                (report, f, t)
            };
            sweep.push(SweepPoint {
                n,
                map: report.map,
                rank1: report.rank(1),
                avg_fscore,
                tier_fscores,
            });
        }
    }

    Ok(ExperimentResult {
        config: config.clone(),
        config_hash: hash,
        seed: config.seed,
        metrics,
        sweep,
        rounds,
        partition_fscore,
        partition_tier_fscores,
    })
}

/// Run the experiment for `seeds`, each with its own copy of `config`.
pub fn run_seeds(config: &RunConfig, seeds: &[u64], with_sweep: bool) -> Result<Vec<ExperimentResult>> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = RunConfig { seed, ..config.clone() };
            run_experiment(&cfg, with_sweep)
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

pub const METRICS_HEADER: [&str; 11] = [
    "config_hash",
    "seed",
    "variant",
    "n",
    "mAP",
    "rank1",
    "rank5",
    "rank10",
    "fscore",
    "evaluated",
    "excluded",
];

pub const ROUNDS_HEADER: [&str; 11] = [
    "config_hash",
    "seed",
    "variant",
    "n",
    "paradigm",
    "round",
    "active_model",
    "selected_count",
    "mean_loss",
    "teacher_val_mAP",
    "ema_teacher_val_mAP",
];

pub const SWEEP_HEADER: [&str; 6] = ["config_hash", "seed", "n", "mAP", "rank1", "avg_fscore"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let mut rec = vec![
            r.config_hash.clone(),
            r.seed.to_string(),
            r.variant.clone(),
            r.n.to_string(),
        ];
        rec.extend(r.report.csv_fields());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rounds_csv<W: Write>(rows: &[RoundRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROUNDS_HEADER)?;
    for r in rows {
        w.write_record([
            r.config_hash.clone(),
            r.seed.to_string(),
            r.variant.clone(),
            r.n.to_string(),
            r.log.paradigm.to_string(),
            r.log.round.to_string(),
            r.log.active_model.clone(),
            r.log.selected_count.to_string(),
            opt(r.log.mean_loss),
            format!("{:.6}", r.log.teacher_val_map),
            opt(r.log.ema_teacher_val_map),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(results: &[ExperimentResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for res in results {
        for p in &res.sweep {
            w.write_record([
                res.config_hash.clone(),
                res.seed.to_string(),
                p.n.to_string(),
                format!("{:.6}", p.map),
                format!("{:.6}", p.rank1),
                format!("{:.6}", p.avg_fscore),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write `metrics.csv`, `rounds.csv`, `sweep.csv` (when any sweep ran) and
/// `result.json` into `dir`.
pub fn write_outputs(results: &[ExperimentResult], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let metrics: Vec<MetricRow> = results.iter().flat_map(|r| r.metrics.clone()).collect();
    let rounds: Vec<RoundRow> = results.iter().flat_map(|r| r.rounds.clone()).collect();
    write_metrics_csv(&metrics, std::fs::File::create(dir.join("metrics.csv"))?)?;
    write_rounds_csv(&rounds, std::fs::File::create(dir.join("rounds.csv"))?)?;
    if results.iter().any(|r| !r.sweep.is_empty()) {
        write_sweep_csv(results, std::fs::File::create(dir.join("sweep.csv"))?)?;
    }
    std::fs::write(dir.join("result.json"), serde_json::to_string_pretty(results)?)?;
    Ok(())
}
