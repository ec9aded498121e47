//! Command-line driver. Exit codes: 0 success, 1 config error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mcnmt::clustering::{partition_granularity, GranularityPartition};
use mcnmt::coteach::{CoteachData, EmaCadence};
use mcnmt::encoder::EncoderParams;
use mcnmt::pipeline::{
    adapt_finetune, run_coteaching, run_seeds, train_source, write_metrics_csv, write_outputs, write_rounds_csv,
    Evaluator, MetricRow, RoundRow, RunConfig, Variant,
};
use mcnmt::synthdata::{make_benchmark, SyntheticDataset};
use mcnmt::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mcnmt",
    version,
    about = "Multiple co-teaching with mean-teaching on synthetic domain shift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write source.json and target.json for a benchmark preset.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Train the source model on a labeled source dataset.
    TrainSource {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split the target train set into confidence tiers.
    Partition {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on the pseudo-labeled tiers.
    Adapt {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Co-teach from an adapted model; writes the best model and the round log.
    Coteach {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rounds_csv: Option<PathBuf>,
    },
    /// Test-split retrieval metrics of a model as one CSV row.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Adds the average tier F-score of this partition.
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Direct transfer, fine-tune, MCN and MCN-MT on the benchmark.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        seeds: SeedsArgs,
        #[arg(long, default_value = "results")]
        out_dir: PathBuf,
    },
    /// MCN-MT accuracy and pseudo-label F-score across granularities.
    SweepN {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        seeds: SeedsArgs,
        #[arg(long, default_value = "results")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct SeedsArgs {
    /// Number of consecutive seeds starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    seed_count: u64,
}

impl SeedsArgs {
    fn seeds(&self, first: u64) -> Result<Vec<u64>> {
        if self.seed_count == 0 {
            return Err(Error::config("seed_count", "must be at least 1"));
        }
        Ok((first..first + self.seed_count).collect())
    }
}

/// Every run option; anything set here overrides the config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    keep_rate: Option<f64>,
    #[arg(long)]
    eps_base: Option<f64>,
    #[arg(long)]
    eps_percentile: Option<f64>,
    #[arg(long)]
    eps_ratio: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    source_steps: Option<usize>,
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[arg(long)]
    steps_per_round: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    mean_teaching: Option<bool>,
    #[arg(long)]
    select_with_ema: Option<bool>,
    #[arg(long, value_parser = parse_cadence)]
    ema_cadence: Option<EmaCadence>,
    #[arg(long, value_parser = parse_coteach_data)]
    coteach_data: Option<CoteachData>,
    #[arg(long)]
    coteach_learning_rate: Option<f64>,
    #[arg(long)]
    repartition: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    sweep_ns: Option<Vec<usize>>,
}

fn parse_cadence(s: &str) -> std::result::Result<EmaCadence, String> {
    match s {
        "step" => Ok(EmaCadence::Step),
        "round" => Ok(EmaCadence::Round),
        other => Err(format!("expected 'step' or 'round', got '{other}'")),
    }
}

fn parse_coteach_data(s: &str) -> std::result::Result<CoteachData, String> {
    match s {
        "selected" => Ok(CoteachData::Selected),
        "teacher_anchored" => Ok(CoteachData::TeacherAnchored),
        "own_tier" => Ok(CoteachData::OwnTier),
        other => Err(format!(
            "expected 'selected', 'teacher_anchored' or 'own_tier', got '{other}'"
        )),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone();
                }
            )*};
        }
        set!(
            seed,
            preset,
            n,
            r,
            alpha,
            margin,
            p,
            k,
            keep_rate,
            eps_percentile,
            eps_ratio,
            min_pts,
            learning_rate,
            source_steps,
            finetune_steps,
            steps_per_round,
            patience,
            mean_teaching,
            select_with_ema,
            ema_cadence,
            coteach_data,
            repartition,
            hidden_dims,
            embedding_dim,
            sweep_ns
        );
        if self.eps_base.is_some() {
            c.eps_base = self.eps_base;
        }
        if self.coteach_learning_rate.is_some() {
            c.coteach_learning_rate = self.coteach_learning_rate;
        }
        c.validate()?;
        Ok(c)
    }
}

fn load_target(path: &Path) -> Result<SyntheticDataset> {
    let ds = SyntheticDataset::load(path)?;
    if ds.splits.train.is_empty() {
        return Err(Error::config("target", "dataset has no train split"));
    }
    Ok(ds)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out_dir } => {
            let c = config.resolve()?;
            let (source, target) = make_benchmark(&c.preset, c.seed)?;
            std::fs::create_dir_all(&out_dir)?;
            source.save(out_dir.join("source.json"))?;
            target.save(out_dir.join("target.json"))?;
        }
        Command::TrainSource { config, source, out } => {
            let c = config.resolve()?;
            train_source(&SyntheticDataset::load(source)?, &c)?.save(out)?;
        }
        Command::Partition {
            config,
            model,
            target,
            out,
        } => {
            let c = config.resolve()?;
            let target = load_target(&target)?;
            let model = EncoderParams::load(model)?;
            let view = target.train_view();
            partition_granularity(&model, view.inputs(), c.n, &c.eps_schedule())?.save(out)?;
        }
        Command::Adapt {
            config,
            model,
            partition,
            target,
            out,
        } => {
            let c = config.resolve()?;
            let target = load_target(&target)?;
            let partition = GranularityPartition::load(partition)?;
            adapt_finetune(&EncoderParams::load(model)?, &partition, &target.train_view(), &c)?.save(out)?;
        }
        Command::Coteach {
            config,
            model,
            partition,
            target,
            out,
            rounds_csv,
        } => {
            let c = config.resolve()?;
            let target = load_target(&target)?;
            let partition = GranularityPartition::load(partition)?;
            let eval = Evaluator::new(&target);
            let validate = |m: &EncoderParams| eval.validation_map(m);
            let mut log = Vec::new();
            let outcome = run_coteaching(
                &EncoderParams::load(model)?,
                &partition,
                &target.train_view(),
                &c,
                c.mean_teaching,
                &validate,
                &mut log,
            )?;
            outcome.best.output(c.mean_teaching).save(out)?;
            if let Some(path) = rounds_csv {
                let variant = if c.mean_teaching { Variant::McnMt } else { Variant::Mcn };
                let rows: Vec<RoundRow> = log
                    .into_iter()
                    .map(|l| RoundRow {
                        config_hash: c.hash(),
                        seed: c.seed,
                        variant: variant.name().into(),
                        n: partition.n,
                        log: l,
                    })
                    .collect();
                write_rounds_csv(&rows, std::fs::File::create(path)?)?;
            }
        }
        Command::Evaluate {
            model,
            target,
            partition,
            out,
        } => {
            let target = SyntheticDataset::load(target)?;
            let eval = Evaluator::new(&target);
            let mut report = eval.test(&EncoderParams::load(model)?)?;
            if let Some(p) = partition {
                report.fscore = Some(eval.partition_fscore(&GranularityPartition::load(p)?)?.1);
            }
            let text = report.to_csv()?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
        }
        Command::Experiment { config, seeds, out_dir } => {
            let c = config.resolve()?;
            let results = run_seeds(&c, &seeds.seeds(c.seed)?, false)?;
            write_outputs(&results, &out_dir)?;
            let rows: Vec<MetricRow> = results.iter().flat_map(|r| r.metrics.clone()).collect();
            write_metrics_csv(&rows, std::io::stdout().lock())?;
        }
        Command::SweepN { config, seeds, out_dir } => {
            let c = config.resolve()?;
            let results = run_seeds(&c, &seeds.seeds(c.seed)?, true)?;
            write_outputs(&results, &out_dir)?;
            println!("seed,n,mAP,avg_fscore");
            for r in &results {
                for p in &r.sweep {
                    println!("{},{},{:.6},{:.6}", r.seed, p.n, p.map, p.avg_fscore);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
