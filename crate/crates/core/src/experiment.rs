//! Experiment drivers: scenario runs (pretrain, adapt, evaluate over
//! seeds), random hyperparameter search with a source-free objective,
//! mask-ratio sweeps, ablation grids, and feature export.
//!
//! Every run is single-threaded and deterministic given (seed, config,
//! data); the drivers may execute independent runs on a bounded worker
//! pool and merge results in job order.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{fit_stats, normalize, Dataset, SplitData, UnlabeledData};
use crate::encoder::EncoderVariant;
use crate::error::ConfigError;
use crate::metrics::{argmax_rows, macro_f1, EvalResult};
use crate::model::ModelBundle;
use crate::rng::{fnv1a, SeedRng};
use crate::tensor::no_grad;
use crate::training::{
    adapt_target, plugin_losses, pretrain_source, TrainConfig, TrainError, TrainHooks, TrainLog,
};

/// Top-level configuration accepted by the CLI (`--config` JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Seeds for repeated runs; three by convention.
    pub seeds: Vec<u64>,
    pub search: SearchSpace,
    pub sweep_temporal: Vec<f32>,
    pub sweep_spatial: Vec<f32>,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            search: SearchSpace::default(),
            sweep_temporal: vec![1.0 / 16.0, 0.125, 0.25, 0.5],
            sweep_spatial: vec![0.25, 0.5, 0.75],
            workers: 1,
        }
    }
}

/// Stable hex digest of a canonical-JSON config.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    format!("{:016x}", fnv1a(json.as_bytes()))
}

/// Normalized copies of the four splits involved in one scenario.
/// Source statistics are fit on the source train split, target statistics
/// on the target train split; the domains never share statistics.
pub struct PreparedScenario {
    pub classes: usize,
    pub source_train: SplitData,
    pub source_test: SplitData,
    pub target_train: SplitData,
    pub target_test: SplitData,
}

pub fn prepare_scenario(source: &Dataset, target: &Dataset) -> Result<PreparedScenario, ConfigError> {
    if source.meta.channels != target.meta.channels
        || source.meta.length != target.meta.length
        || source.meta.classes != target.meta.classes
    {
        return Err(ConfigError::new(format!(
            "domain shape mismatch: source [N={} L={} K={}], target [N={} L={} K={}]",
            source.meta.channels,
            source.meta.length,
            source.meta.classes,
            target.meta.channels,
            target.meta.length,
            target.meta.classes
        )));
    }
    let get = |ds: &Dataset, split: &str| -> Result<SplitData, ConfigError> {
        ds.splits
            .get(split)
            .cloned()
            .ok_or_else(|| ConfigError::new(format!("dataset '{}' lacks split '{split}'", ds.meta.name)))
    };
    let mut source_train = get(source, "train")?;
    let mut source_test = get(source, "test")?;
    let mut target_train = get(target, "train")?;
    let mut target_test = get(target, "test")?;

    let src_stats = fit_stats(&source_train);
    normalize(&mut source_train, Some(&src_stats));
    normalize(&mut source_test, Some(&src_stats));
    let trg_stats = fit_stats(&target_train);
    normalize(&mut target_train, Some(&trg_stats));
    normalize(&mut target_test, Some(&trg_stats));

    Ok(PreparedScenario {
        classes: source.meta.classes,
        source_train,
        source_test,
        target_train,
        target_test,
    })
}

/// Eval-mode class predictions over a split.
pub fn predict(bundle: &ModelBundle, split: &SplitData, batch_size: usize) -> Vec<i64> {
    let n = split.samples();
    let mut preds = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    no_grad(|| {
        for chunk in indices.chunks(batch_size.max(1)) {
            let x = split.batch_values(chunk);
            let h = bundle.encoder.encode(&x, false).h;
            let logits = bundle.classifier.forward(&h);
            preds.extend(argmax_rows(&logits));
        }
    });
    preds
}

/// Macro-F1 evaluation of a bundle on a labeled split.
pub fn evaluate(
    bundle: &ModelBundle,
    split: &SplitData,
    classes: usize,
    batch_size: usize,
) -> Result<EvalResult, ConfigError> {
    let labels = split
        .labels
        .as_ref()
        .ok_or_else(|| ConfigError::new("evaluation requires a labeled split"))?;
    let preds = predict(bundle, split, batch_size);
    macro_f1(&preds, labels, classes)
}

/// Label-free adaptation objective: batch-weighted mean of
/// `im + tr + sr` over a target split, eval-mode BN, fixed mask streams.
/// Used to rank hyperparameter draws without touching target labels.
pub fn source_free_objective(
    bundle: &ModelBundle,
    data: UnlabeledData<'_>,
    cfg: &TrainConfig,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let eval_cfg = TrainConfig {
        adapt_bn_eval: true,
        ..cfg.clone()
    };
    let root = SeedRng::new(cfg.seed);
    let mut tmask_rng = root.derive("objective.temporal-mask");
    let mut smask_rng = root.derive("objective.spatial-mask");
    let indices: Vec<usize> = (0..data.samples()).collect();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = data.batch_values(chunk);
        let value = no_grad(|| -> Result<f64, TrainError> {
            let h = bundle.encoder.encode(&x, false).h;
            let logits = bundle.classifier.forward(&h);
            let (im, _, _) = crate::losses::im_loss(&logits);
            let (tr, sr) = plugin_losses(bundle, &x, &eval_cfg, &mut tmask_rng, &mut smask_rng)?;
            let mut v = im.item() as f64;
            if let Some(tr) = tr {
                v += tr.item() as f64;
            }
            if let Some(sr) = sr {
                v += sr.item() as f64;
            }
            Ok(v)
        })?;
        total += value * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// One seed's evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub seed: u64,
    pub adapted: bool,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub config_hash: String,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SeedRun {
    Ok {
        seed: u64,
        source_only: ScenarioResult,
        adapted: Option<ScenarioResult>,
    },
    Failed {
        seed: u64,
        error: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub config_hash: String,
    pub runs: Vec<SeedRun>,
    pub source_mean: f64,
    pub source_std: f64,
    pub adapted_mean: Option<f64>,
    pub adapted_std: Option<f64>,
}

impl ScenarioReport {
    /// Copy with wall-time fields zeroed, for determinism comparisons.
    pub fn with_zeroed_wall(&self) -> ScenarioReport {
        let mut copy = self.clone();
        for run in &mut copy.runs {
            if let SeedRun::Ok {
                source_only,
                adapted,
                ..
            } = run
            {
                source_only.wall_ms = 0;
                if let Some(a) = adapted {
                    a.wall_ms = 0;
                }
            }
        }
        copy
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Full pipeline for one seed: pretrain, optionally adapt, evaluate on the
/// target test split both before and after adaptation.
pub struct PipelineOutput {
    pub pretrained: ModelBundle,
    pub adapted: Option<ModelBundle>,
    pub source_domain_f1: EvalResult,
    pub target_before: EvalResult,
    pub target_after: Option<EvalResult>,
    pub pretrain_log: TrainLog,
    pub adapt_log: Option<TrainLog>,
}

pub fn run_pipeline(
    prep: &PreparedScenario,
    cfg: &TrainConfig,
    adapt: bool,
    hooks: &TrainHooks,
) -> Result<PipelineOutput, TrainError> {
    let (pretrained, pretrain_log) =
        pretrain_source(&prep.source_train, prep.classes, cfg, hooks)?;
    let source_domain_f1 = evaluate(&pretrained, &prep.source_test, prep.classes, cfg.batch_size)?;
    let target_before = evaluate(&pretrained, &prep.target_test, prep.classes, cfg.batch_size)?;
    if !adapt {
        return Ok(PipelineOutput {
            pretrained,
            adapted: None,
            source_domain_f1,
            target_before,
            target_after: None,
            pretrain_log,
            adapt_log: None,
        });
    }
    let (adapted, adapt_log) = adapt_target(
        pretrained.clone_deep(),
        prep.target_train.unlabeled(),
        cfg,
        hooks,
    )?;
    let target_after = evaluate(&adapted, &prep.target_test, prep.classes, cfg.batch_size)?;
    Ok(PipelineOutput {
        pretrained,
        adapted: Some(adapted),
        source_domain_f1,
        target_before,
        target_after: Some(target_after),
        pretrain_log,
        adapt_log: Some(adapt_log),
    })
}

/// Run one cross-domain scenario over several seeds. A failed seed is
/// recorded and the remaining seeds still run. When `out_dir` is given,
/// JSONL step logs, checkpoints, and the report JSON are written there.
pub fn run_scenario(
    prep: &PreparedScenario,
    scenario_id: &str,
    cfg: &TrainConfig,
    seeds: &[u64],
    source_only: bool,
    out_dir: Option<&Path>,
) -> Result<ScenarioReport, TrainError> {
    let hash = config_hash(cfg);
    let mut runs = Vec::new();
    for &seed in seeds {
        let seed_cfg = TrainConfig { seed, ..cfg.clone() };
        let started = Instant::now();
        let seed_dir = out_dir.map(|d| d.join(format!("{scenario_id}/seed{seed}")));
        let hooks = TrainHooks {
            checkpoint_dir: seed_dir.clone(),
        };
        match run_pipeline(prep, &seed_cfg, !source_only, &hooks) {
            Ok(output) => {
                let wall_ms = started.elapsed().as_millis();
                if let Some(dir) = &seed_dir {
                    fs::create_dir_all(dir)?;
                    output.pretrain_log.write_jsonl(&dir.join("pretrain_log.jsonl"))?;
                    if let Some(log) = &output.adapt_log {
                        log.write_jsonl(&dir.join("adapt_log.jsonl"))?;
                    }
                    output.pretrained.save(&dir.join("pretrained.ckpt"))?;
                    if let Some(adapted) = &output.adapted {
                        adapted.save(&dir.join("adapted.ckpt"))?;
                    }
                }
                let make_result = |eval: &EvalResult, adapted: bool| ScenarioResult {
                    scenario: scenario_id.to_string(),
                    seed,
                    adapted,
                    macro_f1: eval.macro_f1,
                    per_class_f1: eval.per_class_f1.clone(),
                    confusion: eval.confusion.clone(),
                    config_hash: hash.clone(),
                    wall_ms,
                };
                runs.push(SeedRun::Ok {
                    seed,
                    source_only: make_result(&output.target_before, false),
                    adapted: output.target_after.as_ref().map(|e| make_result(e, true)),
                });
            }
            Err(err) => runs.push(SeedRun::Failed {
                seed,
                error: err.to_string(),
            }),
        }
    }

    let source_scores: Vec<f64> = runs
        .iter()
        .filter_map(|r| match r {
            SeedRun::Ok { source_only, .. } => Some(source_only.macro_f1),
            _ => None,
        })
        .collect();
    let adapted_scores: Vec<f64> = runs
        .iter()
        .filter_map(|r| match r {
            SeedRun::Ok { adapted: Some(a), .. } => Some(a.macro_f1),
            _ => None,
        })
        .collect();
    let (source_mean, source_std) = mean_std(&source_scores);
    let (adapted_mean, adapted_std) = if adapted_scores.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&adapted_scores);
        (Some(m), Some(s))
    };
    let report = ScenarioReport {
        scenario: scenario_id.to_string(),
        config_hash: hash,
        runs,
        source_mean,
        source_std,
        adapted_mean,
        adapted_std,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(dir.join(format!("{scenario_id}_report.json")), json)?;
        fs::write(
            dir.join(format!("{scenario_id}_report.csv")),
            scenario_csv(&report),
        )?;
    }
    Ok(report)
}

fn scenario_csv(report: &ScenarioReport) -> String {
    let mut out = String::from("scenario,seed,mode,macro_f1,config_hash\n");
    for run in &report.runs {
        match run {
            SeedRun::Ok {
                seed,
                source_only,
                adapted,
            } => {
                out.push_str(&format!(
                    "{},{},source_only,{:.6},{}\n",
                    report.scenario, seed, source_only.macro_f1, report.config_hash
                ));
                if let Some(a) = adapted {
                    out.push_str(&format!(
                        "{},{},adapted,{:.6},{}\n",
                        report.scenario, seed, a.macro_f1, report.config_hash
                    ));
                }
            }
            SeedRun::Failed { seed, error } => {
                out.push_str(&format!(
                    "{},{},failed,,{}\n",
                    report.scenario,
                    seed,
                    error.replace(',', ";")
                ));
            }
        }
    }
    out
}

/// Aligned-text table over scenarios: one column per scenario plus the
/// average, one row for the source-only baseline and one for the adapted
/// model.
pub fn format_scenario_table(reports: &[ScenarioReport]) -> String {
    let mut header = vec!["".to_string()];
    header.extend(reports.iter().map(|r| r.scenario.clone()));
    header.push("AVG".to_string());

    let fmt_cell = |mean: f64, std: f64| format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * std);
    let mut source_row = vec!["Source".to_string()];
    let mut adapted_row = vec!["Adapted".to_string()];
    for r in reports {
        source_row.push(fmt_cell(r.source_mean, r.source_std));
        adapted_row.push(match (r.adapted_mean, r.adapted_std) {
            (Some(m), Some(s)) => fmt_cell(m, s),
            _ => "-".to_string(),
        });
    }
    let avg = |xs: Vec<Option<f64>>| -> String {
        let vals: Vec<f64> = xs.into_iter().flatten().collect();
        if vals.is_empty() {
            "-".to_string()
        } else {
            format!("{:.2}", 100.0 * vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    source_row.push(avg(reports.iter().map(|r| Some(r.source_mean)).collect()));
    adapted_row.push(avg(reports.iter().map(|r| r.adapted_mean).collect()));

    render_table(&[header, source_row, adapted_row])
}

fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            out.push_str(&format!("{:<width$}  ", cell, width = widths[i]));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------
// worker pool

/// Run jobs on up to `workers` threads, returning results in job order.
/// Each job owns its state; determinism of individual runs is unaffected
/// by scheduling.
pub fn run_jobs<T, F>(jobs: Vec<F>, workers: usize) -> Vec<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    if workers <= 1 || jobs.len() <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let n = jobs.len();
    let queue: Mutex<Vec<(usize, F)>> = Mutex::new(jobs.into_iter().enumerate().rev().collect());
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n) {
            scope.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop();
                match job {
                    Some((idx, job)) => {
                        let out = job();
                        results.lock().expect("results lock")[idx] = Some(out);
                    }
                    None => break,
                }
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

// ---------------------------------------------------------------------
// random hyperparameter search

/// Uniform sampling ranges for the random search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub draws: usize,
    pub seed: u64,
    pub alpha_range: (f32, f32),
    pub beta_range: (f32, f32),
    pub lr_choices: Vec<f32>,
    pub temporal_ratios: Vec<f32>,
    pub spatial_ratios: Vec<f32>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            draws: 50,
            seed: 0,
            alpha_range: (0.0, 2.0),
            beta_range: (0.0, 2.0),
            lr_choices: vec![3e-4, 1e-3, 3e-3],
            temporal_ratios: vec![1.0 / 16.0, 0.125, 0.25, 0.5],
            spatial_ratios: vec![0.25, 0.5, 0.75],
        }
    }
}

/// Segment count that realizes `ratio` without rounding to zero segments.
pub fn segments_for_ratio(base: usize, ratio: f32) -> usize {
    let need = (1.0 / ratio.max(1e-6)).round() as usize;
    base.max(need.max(1))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrawOutcome {
    pub index: usize,
    pub alpha: f32,
    pub beta: f32,
    pub lr: f32,
    pub temporal_ratio: f32,
    pub spatial_ratio: f32,
    /// Source-free ranking objective (lower is better).
    pub objective: f64,
    /// Target macro-F1 for diagnostics only; never used for ranking.
    pub diagnostic_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchReport {
    pub draws: Vec<DrawOutcome>,
    /// Draw indices sorted by ascending objective.
    pub ranking: Vec<usize>,
    pub best: DrawOutcome,
    pub best_config: TrainConfig,
    pub best_rerun: ScenarioReport,
}

/// Sample `space.draws` configs deterministically from the space.
pub fn sample_draws(space: &SearchSpace, base: &TrainConfig) -> Vec<TrainConfig> {
    let mut rng = SeedRng::new(space.seed).derive("search.draws");
    (0..space.draws)
        .map(|_| {
            let alpha = rng.uniform_range(space.alpha_range.0, space.alpha_range.1);
            let beta = rng.uniform_range(space.beta_range.0, space.beta_range.1);
            let lr = space.lr_choices[rng.below(space.lr_choices.len())];
            let temporal_ratio = space.temporal_ratios[rng.below(space.temporal_ratios.len())];
            let spatial_ratio = space.spatial_ratios[rng.below(space.spatial_ratios.len())];
            TrainConfig {
                alpha,
                beta,
                lr,
                temporal_ratio,
                spatial_ratio,
                num_segments: segments_for_ratio(base.num_segments, temporal_ratio),
                ..base.clone()
            }
        })
        .collect()
}

/// Random search: run each draw on one seed, rank by the source-free
/// objective, then rerun the best draw over `rerun_seeds`.
pub fn random_search(
    prep: &PreparedScenario,
    base: &TrainConfig,
    space: &SearchSpace,
    rerun_seeds: &[u64],
    workers: usize,
    out_dir: Option<&Path>,
) -> Result<SearchReport, TrainError> {
    if space.draws == 0 {
        return Err(ConfigError::new("search needs at least one draw").into());
    }
    let configs = sample_draws(space, base);
    let jobs: Vec<_> = configs
        .iter()
        .enumerate()
        .map(|(index, cfg)| {
            let cfg = cfg.clone();
            move || -> Result<DrawOutcome, String> {
                let output = run_pipeline(prep, &cfg, true, &TrainHooks::default())
                    .map_err(|e| e.to_string())?;
                let adapted = output.adapted.as_ref().expect("adaptation requested");
                let objective = source_free_objective(
                    adapted,
                    prep.target_train.unlabeled(),
                    &cfg,
                    cfg.batch_size,
                )
                .map_err(|e| e.to_string())?;
                Ok(DrawOutcome {
                    index,
                    alpha: cfg.alpha,
                    beta: cfg.beta,
                    lr: cfg.lr,
                    temporal_ratio: cfg.temporal_ratio,
                    spatial_ratio: cfg.spatial_ratio,
                    objective,
                    diagnostic_macro_f1: output.target_after.as_ref().map(|e| e.macro_f1),
                })
            }
        })
        .collect();
    let outcomes = run_jobs(jobs, workers);
    let mut draws = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        draws.push(outcome.map_err(ConfigError::new)?);
    }

    let mut ranking: Vec<usize> = (0..draws.len()).collect();
    ranking.sort_by(|&a, &b| {
        draws[a]
            .objective
            .partial_cmp(&draws[b].objective)
            .expect("finite objectives")
    });
    let best = draws[ranking[0]].clone();
    let best_config = configs[best.index].clone();
    let best_rerun = run_scenario(prep, "search-best", &best_config, rerun_seeds, false, None)?;

    let report = SearchReport {
        draws,
        ranking,
        best,
        best_config,
        best_rerun,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("search_report.json"),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )?;
        let mut csv = String::from(
            "index,alpha,beta,lr,temporal_ratio,spatial_ratio,objective,diagnostic_macro_f1\n",
        );
        for d in &report.draws {
            csv.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                d.index,
                d.alpha,
                d.beta,
                d.lr,
                d.temporal_ratio,
                d.spatial_ratio,
                d.objective,
                d.diagnostic_macro_f1.map(|v| format!("{v:.6}")).unwrap_or_default()
            ));
        }
        fs::write(dir.join("search_draws.csv"), csv)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------
// mask-ratio sweep

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub temporal_ratio: f32,
    pub spatial_ratio: f32,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub best: SweepCell,
}

/// Full-pipeline grid over temporal and spatial masking ratios.
pub fn sweep_mask(
    prep: &PreparedScenario,
    base: &TrainConfig,
    temporal_ratios: &[f32],
    spatial_ratios: &[f32],
    seeds: &[u64],
    workers: usize,
    out_dir: Option<&Path>,
) -> Result<SweepReport, TrainError> {
    let mut grid = Vec::new();
    for &t in temporal_ratios {
        for &s in spatial_ratios {
            grid.push((t, s));
        }
    }
    let jobs: Vec<_> = grid
        .iter()
        .map(|&(t, s)| {
            let cfg = TrainConfig {
                temporal_ratio: t,
                spatial_ratio: s,
                num_segments: segments_for_ratio(base.num_segments, t),
                ..base.clone()
            };
            let seeds = seeds.to_vec();
            move || -> Result<SweepCell, String> {
                let mut scores = Vec::new();
                for &seed in &seeds {
                    let cfg = TrainConfig { seed, ..cfg.clone() };
                    let out = run_pipeline(prep, &cfg, true, &TrainHooks::default())
                        .map_err(|e| e.to_string())?;
                    scores.push(out.target_after.expect("adapted").macro_f1);
                }
                let (mean, std) = mean_std(&scores);
                Ok(SweepCell {
                    temporal_ratio: t,
                    spatial_ratio: s,
                    mean_macro_f1: mean,
                    std_macro_f1: std,
                })
            }
        })
        .collect();
    let mut cells = Vec::new();
    for out in run_jobs(jobs, workers) {
        cells.push(out.map_err(ConfigError::new)?);
    }
    let best = cells
        .iter()
        .max_by(|a, b| a.mean_macro_f1.partial_cmp(&b.mean_macro_f1).expect("finite"))
        .expect("non-empty grid")
        .clone();
    let report = SweepReport { cells, best };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("sweep_report.json"),
            serde_json::to_string_pretty(&report).expect("serializes"),
        )?;
        fs::write(dir.join("sweep_matrix.csv"), sweep_csv(&report, temporal_ratios, spatial_ratios))?;
        fs::write(
            dir.join("sweep_matrix.txt"),
            format_sweep_matrix(&report, temporal_ratios, spatial_ratios),
        )?;
    }
    Ok(report)
}

fn sweep_cell<'a>(report: &'a SweepReport, t: f32, s: f32) -> Option<&'a SweepCell> {
    report
        .cells
        .iter()
        .find(|c| (c.temporal_ratio - t).abs() < 1e-9 && (c.spatial_ratio - s).abs() < 1e-9)
}

fn sweep_csv(report: &SweepReport, temporal: &[f32], spatial: &[f32]) -> String {
    let mut out = String::from("temporal_ratio,spatial_ratio,mean_macro_f1,std_macro_f1\n");
    for &t in temporal {
        for &s in spatial {
            if let Some(c) = sweep_cell(report, t, s) {
                out.push_str(&format!(
                    "{:.6},{:.6},{:.6},{:.6}\n",
                    t, s, c.mean_macro_f1, c.std_macro_f1
                ));
            }
        }
    }
    out
}

/// Matrix view: temporal ratios as rows, spatial ratios as columns.
pub fn format_sweep_matrix(report: &SweepReport, temporal: &[f32], spatial: &[f32]) -> String {
    let mut rows = Vec::new();
    let mut header = vec!["t\\s".to_string()];
    header.extend(spatial.iter().map(|s| format!("{s:.3}")));
    rows.push(header);
    for &t in temporal {
        let mut row = vec![format!("{t:.4}")];
        for &s in spatial {
            row.push(match sweep_cell(report, t, s) {
                Some(c) => format!("{:.2}", 100.0 * c.mean_macro_f1),
                None => "-".to_string(),
            });
        }
        rows.push(row);
    }
    render_table(&rows)
}

// ---------------------------------------------------------------------
// ablation grids

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub disable_tr: bool,
    pub disable_sr: bool,
    pub encoder_variant: EncoderVariant,
    pub per_seed: Vec<f64>,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    /// {both, tr-only, sr-only, neither} with the full encoder.
    pub task_grid: Vec<AblationCell>,
    /// {full, temporal_only, spatial_only} with both tasks on.
    pub encoder_grid: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&AblationCell> {
        self.task_grid
            .iter()
            .chain(self.encoder_grid.iter())
            .find(|c| c.name == name)
    }
}

/// Task-removal and encoder-variant grids, each cell averaged over seeds.
pub fn run_ablation(
    prep: &PreparedScenario,
    base: &TrainConfig,
    seeds: &[u64],
    workers: usize,
    out_dir: Option<&Path>,
) -> Result<AblationReport, TrainError> {
    let task_cells: Vec<(&str, bool, bool, EncoderVariant)> = vec![
        ("both", false, false, base.encoder_variant),
        ("tr-only", false, true, base.encoder_variant),
        ("sr-only", true, false, base.encoder_variant),
        ("neither", true, true, base.encoder_variant),
    ];
    let encoder_cells: Vec<(&str, bool, bool, EncoderVariant)> = vec![
        ("encoder-full", false, false, EncoderVariant::Full),
        ("encoder-temporal", false, false, EncoderVariant::TemporalOnly),
        ("encoder-spatial", false, false, EncoderVariant::SpatialOnly),
    ];

    let run_grid = |cells: &[(&str, bool, bool, EncoderVariant)]| -> Result<Vec<AblationCell>, TrainError> {
        let jobs: Vec<_> = cells
            .iter()
            .map(|&(name, disable_tr, disable_sr, variant)| {
                let cfg = TrainConfig {
                    disable_tr,
                    disable_sr,
                    encoder_variant: variant,
                    ..base.clone()
                };
                let seeds = seeds.to_vec();
                let name = name.to_string();
                move || -> Result<AblationCell, String> {
                    let mut per_seed = Vec::new();
                    for &seed in &seeds {
                        let cfg = TrainConfig { seed, ..cfg.clone() };
                        let out = run_pipeline(prep, &cfg, true, &TrainHooks::default())
                            .map_err(|e| format!("{name}: {e}"))?;
                        per_seed.push(out.target_after.expect("adapted").macro_f1);
                    }
                    let (mean, std) = mean_std(&per_seed);
                    Ok(AblationCell {
                        name,
                        disable_tr,
                        disable_sr,
                        encoder_variant: variant,
                        per_seed,
                        mean_macro_f1: mean,
                        std_macro_f1: std,
                    })
                }
            })
            .collect();
        let mut out = Vec::new();
        for cell in run_jobs(jobs, workers) {
            out.push(cell.map_err(ConfigError::new)?);
        }
        Ok(out)
    };

    let report = AblationReport {
        task_grid: run_grid(&task_cells)?,
        encoder_grid: run_grid(&encoder_cells)?,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("ablation_report.json"),
            serde_json::to_string_pretty(&report).expect("serializes"),
        )?;
        fs::write(dir.join("ablation.csv"), ablation_csv(&report))?;
        fs::write(dir.join("ablation.txt"), format_ablation_table(&report))?;
    }
    Ok(report)
}

fn ablation_csv(report: &AblationReport) -> String {
    let mut out = String::from("grid,name,mean_macro_f1,std_macro_f1,per_seed\n");
    for (grid, cells) in [("task", &report.task_grid), ("encoder", &report.encoder_grid)] {
        for c in cells {
            let per_seed = c
                .per_seed
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{}\n",
                grid, c.name, c.mean_macro_f1, c.std_macro_f1, per_seed
            ));
        }
    }
    out
}

pub fn format_ablation_table(report: &AblationReport) -> String {
    let mut rows = vec![vec![
        "cell".to_string(),
        "mean MF1".to_string(),
        "std".to_string(),
    ]];
    for cell in report.task_grid.iter().chain(report.encoder_grid.iter()) {
        rows.push(vec![
            cell.name.clone(),
            format!("{:.2}", 100.0 * cell.mean_macro_f1),
            format!("{:.2}", 100.0 * cell.std_macro_f1),
        ]);
    }
    render_table(&rows)
}

// ---------------------------------------------------------------------
// feature export

/// Write flattened node embeddings plus a domain tag and label column as
/// CSV (`feat_0..feat_{N*D-1},domain,label`; label -1 when absent).
pub fn export_features(
    bundle: &ModelBundle,
    split: &SplitData,
    domain: &str,
    batch_size: usize,
    path: &Path,
) -> Result<(), TrainError> {
    let mut file = fs::File::create(path)?;
    let n_features = bundle.config().channels * crate::encoder::EMBED_DIM;
    let mut header = (0..n_features)
        .map(|i| format!("feat_{i}"))
        .collect::<Vec<_>>()
        .join(",");
    header.push_str(",domain,label\n");
    file.write_all(header.as_bytes())?;

    let indices: Vec<usize> = (0..split.samples()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let h = no_grad(|| bundle.encoder.encode(&split.batch_values(chunk), false).h);
        let values = h.to_vec();
        for (row, &sample) in chunk.iter().enumerate() {
            let mut line = String::with_capacity(n_features * 10);
            for j in 0..n_features {
                if j > 0 {
                    line.push(',');
                }
                line.push_str(&format!("{}", values[row * n_features + j]));
            }
            let label = split.labels.as_ref().map(|l| l[sample]).unwrap_or(-1);
            line.push_str(&format!(",{domain},{label}\n"));
            file.write_all(line.as_bytes())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------

/// Spearman rank correlation between two paired samples.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let rank = |xs: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite values"));
        let mut ranks = vec![0.0; xs.len()];
        for (r, &i) in idx.iter().enumerate() {
            ranks[i] = r as f64;
        }
        ranks
    };
    let (ra, rb) = (rank(a), rank(b));
    let (ma, sa) = mean_std(&ra);
    let (mb, sb) = mean_std(&rb);
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    let cov = ra
        .iter()
        .zip(&rb)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / ra.len() as f64;
    cov / (sa * sb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_domains, ShiftSpec};

    fn tiny_prep() -> PreparedScenario {
        let spec = ShiftSpec::sized(3, 3, 16);
        let (source, target) = synth_domains(&spec, 10, 21).unwrap();
        prepare_scenario(&source, &target).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 10,
            num_segments: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn scenario_report_aggregates_seeds() {
        let prep = tiny_prep();
        let report =
            run_scenario(&prep, "s0", &tiny_cfg(), &[0, 1], false, None).unwrap();
        assert_eq!(report.runs.len(), 2);
        assert!(report.adapted_mean.is_some());
        for run in &report.runs {
            assert!(matches!(run, SeedRun::Ok { .. }));
        }
    }

    #[test]
    fn scenario_is_deterministic_modulo_wall_time() {
        let prep = tiny_prep();
        let cfg = tiny_cfg();
        let a = run_scenario(&prep, "s0", &cfg, &[3], false, None).unwrap();
        let b = run_scenario(&prep, "s0", &cfg, &[3], false, None).unwrap();
        let ja = serde_json::to_string(&a.with_zeroed_wall()).unwrap();
        let jb = serde_json::to_string(&b.with_zeroed_wall()).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn draw_sampling_is_deterministic() {
        let space = SearchSpace {
            draws: 10,
            ..SearchSpace::default()
        };
        let base = tiny_cfg();
        let a = sample_draws(&space, &base);
        let b = sample_draws(&space, &base);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.alpha, y.alpha);
            assert_eq!(x.beta, y.beta);
            assert_eq!(x.lr, y.lr);
            assert_eq!(x.temporal_ratio, y.temporal_ratio);
            assert_eq!(x.spatial_ratio, y.spatial_ratio);
        }
    }

    #[test]
    fn segments_adjust_to_realize_small_ratios() {
        assert_eq!(segments_for_ratio(8, 1.0 / 16.0), 16);
        assert_eq!(segments_for_ratio(8, 0.125), 8);
        assert_eq!(segments_for_ratio(8, 0.5), 8);
    }

    #[test]
    fn run_jobs_preserves_order() {
        let jobs: Vec<_> = (0..7)
            .map(|i| move || i * 10)
            .collect();
        let out = run_jobs(jobs, 3);
        assert_eq!(out, vec![0, 10, 20, 30, 40, 50, 60]);
    }

    #[test]
    fn spearman_detects_monotone_relation() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let up = vec![10.0, 20.0, 30.0, 40.0];
        let down = vec![4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &up) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &down) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn export_features_row_and_column_counts() {
        let prep = tiny_prep();
        let cfg = TrainConfig {
            epochs: 1,
            ..tiny_cfg()
        };
        let (bundle, _) =
            pretrain_source(&prep.source_train, prep.classes, &cfg, &TrainHooks::default())
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        export_features(&bundle, &prep.source_test, "source", 8, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), prep.source_test.samples() + 1);
        let cols = lines[1].split(',').count();
        assert_eq!(cols, 3 * crate::encoder::EMBED_DIM + 2);
        // deterministic in eval mode
        let path2 = dir.path().join("features2.csv");
        export_features(&bundle, &prep.source_test, "source", 8, &path2).unwrap();
        assert_eq!(text, fs::read_to_string(&path2).unwrap());
    }
}
