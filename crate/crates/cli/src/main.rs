//! Experiment CLI: dataset generation and import, two-stage training,
//! evaluation, scenario/ablation/search/sweep drivers, and feature export.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use terse_core::data::{
    import_csv, load_dataset, save_dataset, synth_domains, DataError, Dataset, DomainTransform,
    ShiftSpec,
};
use terse_core::encoder::EncoderVariant;
use terse_core::error::ConfigError;
use terse_core::experiment::{
    evaluate, export_features, format_ablation_table, format_scenario_table, format_sweep_matrix,
    prepare_scenario, random_search, run_ablation, run_scenario, sweep_mask, ExperimentConfig,
    PreparedScenario,
};
use terse_core::model::{CheckpointError, ModelBundle};
use terse_core::training::{
    adapt_target, pretrain_source, TrainConfig, TrainError, TrainHooks,
};

#[derive(Parser)]
#[command(name = "terse", version, about = "Source-free domain adaptation for multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Full,
    Temporal,
    Spatial,
}

impl From<EncoderArg> for EncoderVariant {
    fn from(v: EncoderArg) -> Self {
        match v {
            EncoderArg::Full => EncoderVariant::Full,
            EncoderArg::Temporal => EncoderVariant::TemporalOnly,
            EncoderArg::Spatial => EncoderVariant::SpatialOnly,
        }
    }
}

/// Flags shared by every training-adjacent subcommand. Values given here
/// override the `--config` file, which overrides built-in defaults.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON experiment config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list for multi-seed drivers.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    temporal_ratio: Option<f32>,
    #[arg(long)]
    spatial_ratio: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    adapt_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    disable_tr: bool,
    #[arg(long)]
    disable_sr: bool,
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    #[arg(long)]
    workers: Option<usize>,
}

impl Overrides {
    fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        let mut exp: ExperimentConfig = match &self.config {
            Some(path) => {
                let raw = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str(&raw)
                    .map_err(|e| CliError::Config(format!("config parse error: {e}")))?
            }
            None => ExperimentConfig::default(),
        };
        let t = &mut exp.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.alpha {
            t.alpha = v;
        }
        if let Some(v) = self.beta {
            t.beta = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.temporal_ratio {
            t.temporal_ratio = v;
        }
        if let Some(v) = self.spatial_ratio {
            t.spatial_ratio = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.adapt_epochs {
            t.adapt_epochs = Some(v);
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if self.disable_tr {
            t.disable_tr = true;
        }
        if self.disable_sr {
            t.disable_sr = true;
        }
        if let Some(v) = self.encoder {
            t.encoder_variant = v.into();
        }
        if let Some(v) = &self.seeds {
            exp.seeds = v.clone();
        }
        if let Some(v) = self.workers {
            exp.workers = v;
        }
        t.validate().map_err(CliError::from)?;
        Ok(exp)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset pair.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 128)]
        length: usize,
        /// Generate the target with an identity transform (no shift).
        #[arg(long)]
        no_shift: bool,
    },
    /// Convert long-format CSV (values.csv [+ labels.csv]) to a dataset dir.
    ImportCsv {
        #[arg(long)]
        csv_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        channels: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Stage 1: source pre-training. Writes final.ckpt and the JSONL log.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Stage 2: source-free adaptation from a pre-trained checkpoint.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a labeled split (macro-F1 JSON to stdout).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Pretrain + adapt + evaluate over seeds; emits report and table.
    Scenario {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "scenario")]
        id: String,
        /// Skip adaptation (source-only baseline row).
        #[arg(long)]
        source_only: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Task-removal and encoder-variant ablation grids.
    Ablate {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Random hyperparameter search ranked by a source-free objective.
    Search {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        draws: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Temporal x spatial mask-ratio grid.
    SweepMask {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',')]
        temporal: Option<Vec<f32>>,
        #[arg(long, value_delimiter = ',')]
        spatial: Option<Vec<f32>>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Export node embeddings as CSV for external projection tools.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "target")]
        domain: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => CliError::Config(c.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::Optim(_) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(path)?)
}

fn prepare(source: &Path, target: &Path) -> Result<PreparedScenario, CliError> {
    let source = load(source)?;
    let target = load(target)?;
    Ok(prepare_scenario(&source, &target)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            out_dir,
            n_per_class,
            seed,
            channels,
            classes,
            length,
            no_shift,
        } => {
            let mut spec = ShiftSpec::sized(channels, classes, length);
            if no_shift {
                spec.transform = DomainTransform::none();
            }
            let (source, target) = synth_domains(&spec, n_per_class, seed)?;
            save_dataset(&out_dir.join("source"), &source)?;
            save_dataset(&out_dir.join("target"), &target)?;
            println!(
                "wrote {} (train {} / test {}) and {} (train {} / test {})",
                out_dir.join("source").display(),
                source.meta.splits["train"],
                source.meta.splits["test"],
                out_dir.join("target").display(),
                target.meta.splits["train"],
                target.meta.splits["test"],
            );
        }
        Command::ImportCsv {
            csv_dir,
            out_dir,
            name,
            channels,
            classes,
            length,
            split,
        } => {
            let spec = terse_core::data::ImportSpec {
                name,
                channels,
                classes,
                length,
                split,
            };
            let dataset = import_csv(&csv_dir, &out_dir, &spec)?;
            println!(
                "imported {} samples into {}",
                dataset.splits.values().map(|s| s.samples()).sum::<usize>(),
                out_dir.display()
            );
        }
        Command::Pretrain {
            dataset,
            out_dir,
            overrides,
        } => {
            let exp = overrides.experiment()?;
            let ds = load(&dataset)?;
            let mut train = ds.split("train")?.clone();
            terse_core::data::normalize(&mut train, None);
            std::fs::create_dir_all(&out_dir)?;
            let hooks = TrainHooks {
                checkpoint_dir: Some(out_dir.clone()),
            };
            let (bundle, log) = pretrain_source(&train, ds.meta.classes, &exp.train, &hooks)?;
            bundle.save(&out_dir.join("final.ckpt"))?;
            log.write_jsonl(&out_dir.join("pretrain_log.jsonl"))?;
            println!("pretrained checkpoint: {}", out_dir.join("final.ckpt").display());
        }
        Command::Adapt {
            checkpoint,
            dataset,
            out_dir,
            overrides,
        } => {
            let exp = overrides.experiment()?;
            let bundle = ModelBundle::load(&checkpoint)?;
            let ds = load(&dataset)?;
            let mut train = ds.split("train")?.clone();
            terse_core::data::normalize(&mut train, None);
            std::fs::create_dir_all(&out_dir)?;
            let hooks = TrainHooks {
                checkpoint_dir: Some(out_dir.clone()),
            };
            let (adapted, log) = adapt_target(bundle, train.unlabeled(), &exp.train, &hooks)?;
            adapted.save(&out_dir.join("adapted.ckpt"))?;
            log.write_jsonl(&out_dir.join("adapt_log.jsonl"))?;
            println!("adapted checkpoint: {}", out_dir.join("adapted.ckpt").display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            overrides,
        } => {
            let exp = overrides.experiment()?;
            let bundle = ModelBundle::load(&checkpoint)?;
            let ds = load(&dataset)?;
            let mut data = ds.split(&split)?.clone();
            terse_core::data::normalize(&mut data, None);
            let result = evaluate(&bundle, &data, ds.meta.classes, exp.train.batch_size)?;
            println!("{}", serde_json::to_string_pretty(&result).expect("serializes"));
        }
        Command::Scenario {
            source,
            target,
            out_dir,
            id,
            source_only,
            overrides,
        } => {
            let exp = overrides.experiment()?;
            let prep = prepare(&source, &target)?;
            let report = run_scenario(
                &prep,
                &id,
                &exp.train,
                &exp.seeds,
                source_only,
                Some(&out_dir),
            )?;
            print!("{}", format_scenario_table(std::slice::from_ref(&report)));
        }
        Command::Ablate {
            source,
            target,
            out_dir,
            overrides,
        } => {
            let exp = overrides.experiment()?;
            let prep = prepare(&source, &target)?;
            let report = run_ablation(&prep, &exp.train, &exp.seeds, exp.workers, Some(&out_dir))?;
            print!("{}", format_ablation_table(&report));
        }
        Command::Search {
            source,
            target,
            out_dir,
            draws,
            overrides,
        } => {
            let exp = overrides.experiment()?;
            let mut space = exp.search.clone();
            if let Some(d) = draws {
                space.draws = d;
            }
            let prep = prepare(&source, &target)?;
            let report = random_search(
                &prep,
                &exp.train,
                &space,
                &exp.seeds,
                exp.workers,
                Some(&out_dir),
            )?;
            println!(
                "best draw #{} (objective {:.4}): alpha={:.3} beta={:.3} lr={} t={} s={}",
                report.best.index,
                report.best.objective,
                report.best.alpha,
                report.best.beta,
                report.best.lr,
                report.best.temporal_ratio,
                report.best.spatial_ratio,
            );
            if let (Some(m), Some(s)) = (report.best_rerun.adapted_mean, report.best_rerun.adapted_std) {
                println!("rerun over {:?}: {:.2}±{:.2}", exp.seeds, 100.0 * m, 100.0 * s);
            }
        }
        Command::SweepMask {
            source,
            target,
            out_dir,
            temporal,
            spatial,
            overrides,
        } => {
            let exp = overrides.experiment()?;
            let temporal = temporal.unwrap_or(exp.sweep_temporal.clone());
            let spatial = spatial.unwrap_or(exp.sweep_spatial.clone());
            let prep = prepare(&source, &target)?;
            let report = sweep_mask(
                &prep,
                &exp.train,
                &temporal,
                &spatial,
                &exp.seeds,
                exp.workers,
                Some(&out_dir),
            )?;
            print!("{}", format_sweep_matrix(&report, &temporal, &spatial));
        }
        Command::ExportFeatures {
            checkpoint,
            dataset,
            split,
            domain,
            out,
            overrides,
        } => {
            let exp = overrides.experiment()?;
            let bundle = ModelBundle::load(&checkpoint)?;
            let ds = load(&dataset)?;
            let mut data = ds.split(&split)?.clone();
            terse_core::data::normalize(&mut data, None);
            export_features(&bundle, &data, &domain, exp.train.batch_size, &out)?;
            println!("features written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}
