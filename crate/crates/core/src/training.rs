//! Stage 1 source pre-training and stage 2 source-free target adaptation.
//!
//! Pre-training jointly minimizes classification plus the two auxiliary
//! reconstruction losses, with gradient stopping: the auxiliary inputs are
//! computed under `no_grad` and their targets detached, so only the
//! restoration and rewiring heads receive auxiliary gradients.
//!
//! Adaptation freezes classifier and both heads, then trains the encoder
//! on a host objective (information maximization by default) plus the
//! plugged-in auxiliary losses. `adapt_target` is literally the IM host
//! composed with [`plugin_losses`], which is what makes the plug-and-play
//! identity hold parameter-for-parameter.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auxiliary::{spatial_mask, temporal_mask};
use crate::data::{SplitData, UnlabeledData};
use crate::encoder::{EncoderConfig, EncoderVariant};
use crate::error::ConfigError;
use crate::losses::{
    cls_loss, im_loss, restoration_loss, rewiring_loss, source_composite, LossReport,
};
use crate::model::{CheckpointError, ModelBundle, ParamGroup};
use crate::optim::{Adam, AdamConfig, OptimError};
use crate::rng::SeedRng;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at stage '{stage}' epoch {epoch} step {step}")]
    NonFiniteLoss {
        stage: &'static str,
        epoch: usize,
        step: usize,
        /// Most recent epoch checkpoint written before the failure.
        last_good: Option<PathBuf>,
    },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("bundle lacks auxiliary parameters: {0}")]
    MissingAux(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// All training hyperparameters. Defaults follow the reference recipe:
/// 40 epochs, batch 32, lr 1e-3, temporal masking 1/8 over 8 segments,
/// spatial masking 0.5, label smoothing 0.1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stage-2 epochs; defaults to `epochs` when unset.
    pub adapt_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f32,
    pub temporal_ratio: f32,
    pub spatial_ratio: f32,
    pub num_segments: usize,
    pub alpha: f32,
    pub beta: f32,
    pub eta: f32,
    pub seed: u64,
    pub disable_tr: bool,
    pub disable_sr: bool,
    pub encoder_variant: EncoderVariant,
    /// Detach the restoration target H during adaptation instead of
    /// training both encoder paths.
    pub detach_restoration_target: bool,
    /// Run adaptation-stage BN on running statistics instead of target
    /// batch statistics.
    pub adapt_bn_eval: bool,
    /// Per-element mean instead of per-sample squared-L2 reconstruction.
    pub per_element_mse: bool,
    /// Drop the classification term during pre-training (gradient-stop
    /// diagnostics only).
    pub debug_disable_cls: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            adapt_epochs: None,
            batch_size: 32,
            lr: 1e-3,
            temporal_ratio: 0.125,
            spatial_ratio: 0.5,
            num_segments: 8,
            alpha: 0.5,
            beta: 0.5,
            eta: 0.1,
            seed: 0,
            disable_tr: false,
            disable_sr: false,
            encoder_variant: EncoderVariant::Full,
            detach_restoration_target: false,
            adapt_bn_eval: false,
            per_element_mse: false,
            debug_disable_cls: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ConfigError::new("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::new(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(ConfigError::new(format!("eta must be in [0, 1), got {}", self.eta)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(ConfigError::new("alpha and beta must be nonnegative"));
        }
        Ok(())
    }

    pub fn adapt_epochs(&self) -> usize {
        self.adapt_epochs.unwrap_or(self.epochs)
    }
}

/// One optimization step in the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub run_id: String,
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: LossReport,
    pub lr: f32,
    pub wall_ms: u128,
}

#[derive(Debug, Default, Clone)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut file = fs::File::create(path)?;
        for record in &self.records {
            serde_json::to_writer(&mut file, record)?;
            file.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Mean of a loss component over the steps of one epoch.
    pub fn epoch_component_mean(&self, epoch: usize, component: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == epoch)
            .filter_map(|r| r.loss.components.get(component).map(|v| *v as f64))
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// Optional side effects of a training run.
#[derive(Debug, Default, Clone)]
pub struct TrainHooks {
    /// When set, a rolling checkpoint is written after every epoch and
    /// retained as the last-good state on failure.
    pub checkpoint_dir: Option<PathBuf>,
}

struct EpochCheckpointer<'a> {
    hooks: &'a TrainHooks,
    stage: &'static str,
    last_good: Option<PathBuf>,
}

impl<'a> EpochCheckpointer<'a> {
    fn new(hooks: &'a TrainHooks, stage: &'static str) -> Self {
        EpochCheckpointer {
            hooks,
            stage,
            last_good: None,
        }
    }

    fn after_epoch(&mut self, bundle: &ModelBundle) -> Result<(), TrainError> {
        if let Some(dir) = &self.hooks.checkpoint_dir {
            fs::create_dir_all(dir)?;
            let path = dir.join(format!("{}_last.ckpt", self.stage));
            bundle.save(&path)?;
            self.last_good = Some(path);
        }
        Ok(())
    }
}

/// Stage 1: train encoder, classifier, and both auxiliary heads on the
/// labeled source split. Auxiliary gradients never reach the encoder or
/// classifier.
pub fn pretrain_source(
    data: &SplitData,
    num_classes: usize,
    cfg: &TrainConfig,
    hooks: &TrainHooks,
) -> Result<(ModelBundle, TrainLog), TrainError> {
    cfg.validate()?;
    let labels_all = data
        .labels
        .as_ref()
        .ok_or_else(|| ConfigError::new("source pre-training requires a labeled split"))?;
    for (i, &l) in labels_all.iter().enumerate() {
        if l < 0 || l >= num_classes as i64 {
            return Err(ConfigError::new(format!(
                "label {l} at sample {i} out of range [0, {num_classes})"
            ))
            .into());
        }
    }
    let enc_cfg = EncoderConfig {
        channels: data.channels,
        seq_len: data.seq_len,
        num_classes,
        variant: cfg.encoder_variant,
    };
    let mut bundle = ModelBundle::new(enc_cfg, cfg.seed)?;
    let mut optimizer = Adam::new(AdamConfig::with_lr(cfg.lr), bundle.named_params());

    let root = SeedRng::new(cfg.seed);
    let mut shuffle_rng = root.derive("pretrain.shuffle");
    let mut tmask_rng = root.derive("pretrain.temporal-mask");
    let mut smask_rng = root.derive("pretrain.spatial-mask");

    let run_id = format!("pretrain-seed{}", cfg.seed);
    let mut log = TrainLog::default();
    let mut ckpt = EpochCheckpointer::new(hooks, "pretrain");
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.samples()).collect();
        shuffle_rng.shuffle(&mut order);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.batch_values(chunk);
            let y = data.batch_labels(chunk).expect("labels checked above");

            let out = bundle.encoder.encode(&x, true);
            let cls = if cfg.debug_disable_cls {
                None
            } else {
                let logits = bundle.classifier.forward(&out.h);
                Some(cls_loss(&logits, &y, cfg.eta)?)
            };
            let tr = if cfg.disable_tr {
                None
            } else {
                let (x_masked, _) =
                    temporal_mask(&x, cfg.temporal_ratio, cfg.num_segments, &mut tmask_rng)?;
                let h_masked = no_grad(|| bundle.encoder.encode(&x_masked, true).h);
                let h_hat = bundle.restoration.forward(&h_masked);
                Some(restoration_loss(&out.h.detach(), &h_hat, cfg.per_element_mse))
            };
            let sr = if cfg.disable_sr {
                None
            } else {
                let a_const = out.a.detach();
                let (a_masked, _) = spatial_mask(&a_const, cfg.spatial_ratio, &mut smask_rng)?;
                let h_graph = no_grad(|| bundle.encoder.spatial_gnn(&out.z, &a_masked));
                let a_hat = bundle.rewiring.forward(&h_graph, &a_masked);
                Some(rewiring_loss(&a_const, &a_hat, cfg.per_element_mse))
            };
            let (total, report) =
                source_composite(cls.as_ref(), tr.as_ref(), sr.as_ref(), chunk.len());
            if !report.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    stage: "pretrain",
                    epoch,
                    step,
                    last_good: ckpt.last_good.clone(),
                });
            }
            total.backward();
            optimizer.step()?;
            log.records.push(StepRecord {
                run_id: run_id.clone(),
                stage: "pretrain".into(),
                epoch,
                step,
                loss: report,
                lr: cfg.lr,
                wall_ms: started.elapsed().as_millis(),
            });
        }
        ckpt.after_epoch(&bundle)?;
    }
    bundle.aux.restoration_trained = !cfg.disable_tr;
    bundle.aux.rewiring_trained = !cfg.disable_sr;
    Ok((bundle, log))
}

/// The two auxiliary target losses as composable terms. Self-contained:
/// encodes the batch (and its masked variant) itself, so any host objective
/// can add `alpha * tr + beta * sr` without sharing graph state.
pub fn plugin_losses(
    bundle: &ModelBundle,
    x: &Tensor,
    cfg: &TrainConfig,
    tmask_rng: &mut SeedRng,
    smask_rng: &mut SeedRng,
) -> Result<(Option<Tensor>, Option<Tensor>), TrainError> {
    if cfg.disable_tr && cfg.disable_sr {
        return Ok((None, None));
    }
    if !cfg.disable_tr && !bundle.aux.restoration_trained {
        return Err(TrainError::MissingAux(
            "restoration head was not trained during pre-training".into(),
        ));
    }
    if !cfg.disable_sr && !bundle.aux.rewiring_trained {
        return Err(TrainError::MissingAux(
            "rewiring head was not trained during pre-training".into(),
        ));
    }
    let train_bn = !cfg.adapt_bn_eval;
    let out = bundle.encoder.encode(x, train_bn);
    let tr = if cfg.disable_tr {
        None
    } else {
        let (x_masked, _) = temporal_mask(x, cfg.temporal_ratio, cfg.num_segments, tmask_rng)?;
        let h_masked = bundle.encoder.encode(&x_masked, train_bn).h;
        let h_hat = bundle.restoration.forward(&h_masked);
        let target = if cfg.detach_restoration_target {
            out.h.detach()
        } else {
            out.h.clone()
        };
        Some(restoration_loss(&target, &h_hat, cfg.per_element_mse))
    };
    let sr = if cfg.disable_sr {
        None
    } else {
        let (a_masked, _) = spatial_mask(&out.a, cfg.spatial_ratio, smask_rng)?;
        let h_graph = bundle.encoder.spatial_gnn(&out.z, &a_masked);
        let a_hat = bundle.rewiring.forward(&h_graph, &a_masked);
        Some(rewiring_loss(&out.a, &a_hat, cfg.per_element_mse))
    };
    Ok((tr, sr))
}

/// Host objective for adaptation: produces its own loss over a batch while
/// the plug-in auxiliary losses are added on top by the driver.
pub trait AdaptHost {
    fn name(&self) -> &'static str;
    fn loss(
        &mut self,
        bundle: &ModelBundle,
        x: &Tensor,
        cfg: &TrainConfig,
    ) -> Result<(Tensor, BTreeMap<String, f32>), TrainError>;
}

/// Information-maximization host: per-sample entropy plus batch diversity
/// over the frozen classifier's predictions.
pub struct ImHost;

impl AdaptHost for ImHost {
    fn name(&self) -> &'static str {
        "im"
    }

    fn loss(
        &mut self,
        bundle: &ModelBundle,
        x: &Tensor,
        cfg: &TrainConfig,
    ) -> Result<(Tensor, BTreeMap<String, f32>), TrainError> {
        let h = bundle.encoder.encode(x, !cfg.adapt_bn_eval).h;
        let logits = bundle.classifier.forward(&h);
        let (im, ent, div) = im_loss(&logits);
        let mut components = BTreeMap::new();
        components.insert("im".to_string(), im.item());
        components.insert("im_ent".to_string(), ent);
        components.insert("im_div".to_string(), div);
        Ok((im, components))
    }
}

/// Toy self-training host: cross-entropy against the model's own argmax
/// pseudo-labels (no smoothing, no confidence filtering).
pub struct PseudoLabelHost;

impl AdaptHost for PseudoLabelHost {
    fn name(&self) -> &'static str {
        "pseudo-label"
    }

    fn loss(
        &mut self,
        bundle: &ModelBundle,
        x: &Tensor,
        cfg: &TrainConfig,
    ) -> Result<(Tensor, BTreeMap<String, f32>), TrainError> {
        let h = bundle.encoder.encode(x, !cfg.adapt_bn_eval).h;
        let logits = bundle.classifier.forward(&h);
        let pseudo = crate::metrics::argmax_rows(&logits.detach());
        let ce = cls_loss(&logits, &pseudo, 0.0)?;
        let mut components = BTreeMap::new();
        components.insert("pseudo_ce".to_string(), ce.item());
        Ok((ce, components))
    }
}

/// Stage 2 with an arbitrary host objective. Classifier and both auxiliary
/// heads are frozen; only encoder parameters (including BN affine terms)
/// update. Accepts only unlabeled data by type.
pub fn adapt_with_host(
    bundle: ModelBundle,
    data: UnlabeledData<'_>,
    cfg: &TrainConfig,
    host: &mut dyn AdaptHost,
    hooks: &TrainHooks,
) -> Result<(ModelBundle, TrainLog), TrainError> {
    cfg.validate()?;
    bundle.set_trainable(ParamGroup::Encoder, true);
    bundle.set_trainable(ParamGroup::Classifier, false);
    bundle.set_trainable(ParamGroup::Restoration, false);
    bundle.set_trainable(ParamGroup::Rewiring, false);

    let mut optimizer = Adam::new(
        AdamConfig::with_lr(cfg.lr),
        bundle.group_params(ParamGroup::Encoder),
    );
    let root = SeedRng::new(cfg.seed);
    let mut shuffle_rng = root.derive("adapt.shuffle");
    let mut tmask_rng = root.derive("adapt.temporal-mask");
    let mut smask_rng = root.derive("adapt.spatial-mask");

    let run_id = format!("adapt-{}-seed{}", host.name(), cfg.seed);
    let mut log = TrainLog::default();
    let mut ckpt = EpochCheckpointer::new(hooks, "adapt");
    let started = Instant::now();

    let result = (|| -> Result<(), TrainError> {
        for epoch in 0..cfg.adapt_epochs() {
            let mut order: Vec<usize> = (0..data.samples()).collect();
            shuffle_rng.shuffle(&mut order);
            for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let x = data.batch_values(chunk);
                let (host_loss, host_components) = host.loss(&bundle, &x, cfg)?;
                let (tr, sr) = plugin_losses(&bundle, &x, cfg, &mut tmask_rng, &mut smask_rng)?;

                let mut components = host_components;
                let mut total = host_loss;
                if let Some(tr) = &tr {
                    components.insert("tr".to_string(), tr.item());
                    total = total.add(&tr.mul_scalar(cfg.alpha));
                }
                if let Some(sr) = &sr {
                    components.insert("sr".to_string(), sr.item());
                    total = total.add(&sr.mul_scalar(cfg.beta));
                }
                let report = LossReport {
                    total: total.item(),
                    components,
                    batch_size: chunk.len(),
                };
                if !report.total.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        stage: "adapt",
                        epoch,
                        step,
                        last_good: ckpt.last_good.clone(),
                    });
                }
                total.backward();
                optimizer.step()?;
                log.records.push(StepRecord {
                    run_id: run_id.clone(),
                    stage: "adapt".into(),
                    epoch,
                    step,
                    loss: report,
                    lr: cfg.lr,
                    wall_ms: started.elapsed().as_millis(),
                });
            }
            ckpt.after_epoch(&bundle)?;
        }
        Ok(())
    })();

    // leave the bundle with uniform trainable flags regardless of outcome
    for group in ParamGroup::ALL {
        bundle.set_trainable(group, true);
    }
    result?;
    Ok((bundle, log))
}

/// Stage 2 as shipped: information maximization plus both auxiliary tasks.
pub fn adapt_target(
    bundle: ModelBundle,
    data: UnlabeledData<'_>,
    cfg: &TrainConfig,
    hooks: &TrainHooks,
) -> Result<(ModelBundle, TrainLog), TrainError> {
    adapt_with_host(bundle, data, cfg, &mut ImHost, hooks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_domains, ShiftSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            num_segments: 4,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> SplitData {
        let spec = ShiftSpec::sized(3, 3, 16);
        let (source, _) = synth_domains(&spec, 8, 11).unwrap();
        source.splits["train"].clone()
    }

    #[test]
    fn gradient_stop_isolates_encoder_from_aux_losses() {
        let data = tiny_data();
        let cfg = TrainConfig {
            debug_disable_cls: true,
            epochs: 1,
            batch_size: 24,
            num_segments: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        // pretraining builds its bundle from the same (config, seed), so an
        // untouched twin is the exact initial state
        let enc_cfg = EncoderConfig::new(3, 16, 3);
        let init = ModelBundle::new(enc_cfg, cfg.seed).unwrap();
        let (trained, _) = pretrain_source(&data, 3, &cfg, &TrainHooks::default()).unwrap();

        assert_eq!(
            init.group_bytes(ParamGroup::Encoder),
            trained.group_bytes(ParamGroup::Encoder),
            "aux losses must not move encoder parameters"
        );
        assert_eq!(
            init.group_bytes(ParamGroup::Classifier),
            trained.group_bytes(ParamGroup::Classifier),
            "classifier receives no gradient without the cls term"
        );
        assert_ne!(
            init.group_bytes(ParamGroup::Restoration),
            trained.group_bytes(ParamGroup::Restoration),
            "restoration head must train"
        );
        assert_ne!(
            init.group_bytes(ParamGroup::Rewiring),
            trained.group_bytes(ParamGroup::Rewiring),
            "rewiring head must train"
        );
    }

    #[test]
    fn adaptation_freezes_heads_byte_for_byte() {
        let data = tiny_data();
        let cfg = tiny_config();
        let (bundle, _) = pretrain_source(&data, 3, &cfg, &TrainHooks::default()).unwrap();
        let before = (
            bundle.group_bytes(ParamGroup::Classifier),
            bundle.group_bytes(ParamGroup::Restoration),
            bundle.group_bytes(ParamGroup::Rewiring),
        );
        let encoder_before = bundle.group_bytes(ParamGroup::Encoder);
        let (adapted, _) =
            adapt_target(bundle, data.unlabeled(), &cfg, &TrainHooks::default()).unwrap();
        assert_eq!(before.0, adapted.group_bytes(ParamGroup::Classifier));
        assert_eq!(before.1, adapted.group_bytes(ParamGroup::Restoration));
        assert_eq!(before.2, adapted.group_bytes(ParamGroup::Rewiring));
        assert_ne!(encoder_before, adapted.group_bytes(ParamGroup::Encoder));
    }

    #[test]
    fn pretrain_is_seed_deterministic() {
        let data = tiny_data();
        let cfg = tiny_config();
        let (a, _) = pretrain_source(&data, 3, &cfg, &TrainHooks::default()).unwrap();
        let (b, _) = pretrain_source(&data, 3, &cfg, &TrainHooks::default()).unwrap();
        for group in ParamGroup::ALL {
            assert_eq!(a.group_bytes(group), b.group_bytes(group));
        }
    }

    #[test]
    fn plugin_on_untrained_heads_is_rejected() {
        let data = tiny_data();
        let cfg = TrainConfig {
            disable_tr: true,
            disable_sr: true,
            ..tiny_config()
        };
        let (bundle, _) = pretrain_source(&data, 3, &cfg, &TrainHooks::default()).unwrap();
        // heads never trained; asking for them during adaptation must fail
        let adapt_cfg = tiny_config();
        let err = adapt_target(bundle, data.unlabeled(), &adapt_cfg, &TrainHooks::default());
        assert!(matches!(err, Err(TrainError::MissingAux(_))));
    }

    #[test]
    fn nan_in_data_aborts_with_diagnostic() {
        let mut data = tiny_data();
        data.values[0] = f32::NAN;
        let cfg = tiny_config();
        let err = match pretrain_source(&data, 3, &cfg, &TrainHooks::default()) {
            Err(e) => e,
            Ok(_) => panic!("expected failure on NaN input"),
        };
        match err {
            TrainError::NonFiniteLoss { stage: "pretrain", .. } => {}
            TrainError::Optim(_) => {}
            other => panic!("expected non-finite diagnostics, got {other:?}"),
        }
    }
}
