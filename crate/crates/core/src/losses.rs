//! Scalar training objectives: label-smoothed cross-entropy, the
//! reconstruction MSEs for restoration and rewiring, information
//! maximization, and the stage composites.
//!
//! Reconstruction losses follow the per-sample squared-L2 convention:
//! sum of squared differences per sample, averaged over the batch. A
//! per-element mean variant is available behind a flag for loss-scale
//! comparability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::tensor::{Tensor, EPS_LOG};

/// Component breakdown of a composite loss at one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f32,
    pub components: BTreeMap<String, f32>,
    pub batch_size: usize,
}

impl LossReport {
    fn new(total: f32, components: BTreeMap<String, f32>, batch_size: usize) -> Self {
        LossReport {
            total,
            components,
            batch_size,
        }
    }
}

/// Label-smoothed cross-entropy over logits `[B, K]`:
/// targets are `(1 - eta) * onehot + eta / K`.
pub fn cls_loss(logits: &Tensor, labels: &[i64], eta: f32) -> Result<Tensor, ConfigError> {
    let sh = logits.shape();
    assert_eq!(sh.len(), 2, "cls_loss expects [B, K] logits, got {sh:?}");
    let (b, k) = (sh[0], sh[1]);
    assert_eq!(labels.len(), b, "cls_loss got {} labels for batch of {b}", labels.len());
    if !(0.0..1.0).contains(&eta) {
        return Err(ConfigError::new(format!(
            "label smoothing eta must be in [0, 1), got {eta}"
        )));
    }
    let mut targets = vec![eta / k as f32; b * k];
    for (i, &label) in labels.iter().enumerate() {
        if label < 0 || label >= k as i64 {
            return Err(ConfigError::new(format!(
                "label {label} at index {i} out of range [0, {k})"
            )));
        }
        targets[i * k + label as usize] += 1.0 - eta;
    }
    let target = Tensor::from_vec(targets, &[b, k]);
    let log_p = logits.softmax_rows().add_scalar(EPS_LOG).log();
    Ok(target.mul(&log_p).sum_all().mul_scalar(-1.0 / b as f32))
}

/// Mean over the batch of the squared L2 distance between per-sample
/// tensors (or the per-element mean when `per_element` is set).
pub fn reconstruction_mse(a: &Tensor, b: &Tensor, per_element: bool) -> Tensor {
    assert_eq!(
        a.shape(),
        b.shape(),
        "reconstruction loss shape mismatch: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let batch = a.shape()[0];
    let diff = a.sub(b);
    let total = diff.mul(&diff).sum_all();
    let denom = if per_element { a.numel() } else { batch };
    total.mul_scalar(1.0 / denom as f32)
}

/// Temporal restoration objective between original and restored embeddings.
pub fn restoration_loss(h: &Tensor, h_hat: &Tensor, per_element: bool) -> Tensor {
    reconstruction_mse(h, h_hat, per_element)
}

/// Spatial rewiring objective between original and rewired adjacencies.
pub fn rewiring_loss(a: &Tensor, a_hat: &Tensor, per_element: bool) -> Tensor {
    reconstruction_mse(a, a_hat, per_element)
}

/// Information maximization over logits `[B, K]`: mean per-sample entropy
/// plus the negative entropy of the batch-marginal prediction. Minimized at
/// `-ln K` by confident, balanced predictions.
pub fn im_loss(logits: &Tensor) -> (Tensor, f32, f32) {
    let sh = logits.shape();
    assert_eq!(sh.len(), 2, "im_loss expects [B, K] logits, got {sh:?}");
    let b = sh[0];
    assert!(b >= 1, "im_loss needs at least one sample");
    let p = logits.softmax_rows();
    let ent = p
        .mul(&p.add_scalar(EPS_LOG).log())
        .sum_all()
        .mul_scalar(-1.0 / b as f32);
    let p_bar = p.mean_axis0();
    let div = p_bar.mul(&p_bar.add_scalar(EPS_LOG).log()).sum_all();
    let (ent_v, div_v) = (ent.item(), div.item());
    (ent.add(&div), ent_v, div_v)
}

/// Source pre-training composite (unweighted sum of the present terms).
pub fn source_composite(
    cls: Option<&Tensor>,
    tr: Option<&Tensor>,
    sr: Option<&Tensor>,
    batch_size: usize,
) -> (Tensor, LossReport) {
    let mut components = BTreeMap::new();
    let mut total = Tensor::scalar(0.0);
    if let Some(cls) = cls {
        components.insert("cls".to_string(), cls.item());
        total = total.add(cls);
    }
    if let Some(tr) = tr {
        components.insert("tr".to_string(), tr.item());
        total = total.add(tr);
    }
    if let Some(sr) = sr {
        components.insert("sr".to_string(), sr.item());
        total = total.add(sr);
    }
    let report = LossReport::new(total.item(), components, batch_size);
    (total, report)
}

/// Target adaptation composite: `im + alpha * tr + beta * sr`.
#[allow(clippy::too_many_arguments)]
pub fn target_composite(
    im: &Tensor,
    im_ent: f32,
    im_div: f32,
    tr: Option<&Tensor>,
    sr: Option<&Tensor>,
    alpha: f32,
    beta: f32,
    batch_size: usize,
) -> (Tensor, LossReport) {
    assert!(alpha >= 0.0 && beta >= 0.0, "loss weights must be nonnegative: alpha={alpha} beta={beta}");
    let mut components = BTreeMap::new();
    components.insert("im".to_string(), im.item());
    components.insert("im_ent".to_string(), im_ent);
    components.insert("im_div".to_string(), im_div);
    let mut total = im.clone();
    if let Some(tr) = tr {
        components.insert("tr".to_string(), tr.item());
        total = total.add(&tr.mul_scalar(alpha));
    }
    if let Some(sr) = sr {
        components.insert("sr".to_string(), sr.item());
        total = total.add(&sr.mul_scalar(beta));
    }
    let report = LossReport::new(total.item(), components, batch_size);
    (total, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn smoothed_targets_match_hand_values() {
        // K=6, eta=0.1: on-class target (1-0.1)+0.1/6 = 0.91667,
        // off-class 0.1/6 = 0.016667. Loss checked against a float64
        // re-implementation of -sum(y_hat * log(softmax + eps)).
        let (k, eta) = (6usize, 0.1f64);
        let on = (1.0 - eta) + eta / k as f64;
        let off = eta / k as f64;
        assert!(close(on as f32, 0.9167, 5e-5));
        assert!(close(off as f32, 0.0167, 5e-5));

        let logits = vec![0.4f32, -1.2, 2.2, 0.0, 0.9, -0.3];
        let t = Tensor::from_vec(logits.clone(), &[1, k]);
        let loss = cls_loss(&t, &[2], eta as f32).unwrap().item();

        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = logits.iter().map(|&v| ((v as f64) - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut expect = 0.0f64;
        for (i, e) in exps.iter().enumerate() {
            let target = if i == 2 { on } else { off };
            expect -= target * (e / z + EPS_LOG as f64).ln();
        }
        assert!(close(loss, expect as f32, 1e-5), "loss {loss} expected {expect}");
    }

    #[test]
    fn uniform_logits_eta_zero_gives_ln_k() {
        let t = Tensor::from_vec(vec![0.0; 2 * 5], &[2, 5]);
        let loss = cls_loss(&t, &[0, 3], 0.0).unwrap().item();
        assert!(close(loss, (5.0f32).ln(), 1e-5));
    }

    #[test]
    fn out_of_range_label_names_index() {
        let t = Tensor::from_vec(vec![0.0; 4], &[2, 2]);
        let err = cls_loss(&t, &[0, 5], 0.1).unwrap_err();
        assert!(err.to_string().contains("index 1"), "got: {err}");
    }

    #[test]
    fn mse_identical_is_zero_and_all_ones_counts_entries() {
        let a = Tensor::from_vec(vec![1.0; 2 * 9 * 256], &[2, 9, 256]);
        assert_eq!(reconstruction_mse(&a, &a, false).item(), 0.0);
        let b = Tensor::zeros(&[2, 9, 256]);
        let loss = reconstruction_mse(&a, &b, false).item();
        assert!(close(loss, 2304.0, 1e-2), "per-sample 9*256 ones, got {loss}");
    }

    #[test]
    fn rewiring_loss_counts_matrix_entries() {
        let a = Tensor::from_vec(vec![1.0; 81], &[1, 9, 9]);
        let b = Tensor::zeros(&[1, 9, 9]);
        assert!(close(rewiring_loss(&a, &b, false).item(), 81.0, 1e-4));
    }

    #[test]
    fn im_loss_uniform_is_zero() {
        let logits = Tensor::from_vec(vec![0.0; 4 * 4], &[4, 4]);
        let (loss, ent, div) = im_loss(&logits);
        assert!(close(loss.item(), 0.0, 1e-5));
        assert!(close(ent, (4.0f32).ln(), 1e-5));
        assert!(close(div, -(4.0f32).ln(), 1e-5));
    }

    #[test]
    fn im_loss_one_hot_per_class_is_minus_ln_k() {
        let k = 4;
        let mut logits = vec![0.0f32; k * k];
        for i in 0..k {
            logits[i * k + i] = 60.0;
        }
        let (loss, ent, _div) = im_loss(&Tensor::from_vec(logits, &[k, k]));
        assert!(close(loss.item(), -(k as f32).ln(), 1e-5), "got {}", loss.item());
        assert!(close(ent, 0.0, 1e-5));
    }

    #[test]
    fn im_loss_collapse_is_penalized() {
        let k = 4;
        let mut logits = vec![0.0f32; 3 * k];
        for i in 0..3 {
            logits[i * k] = 60.0;
        }
        let (loss, _, _) = im_loss(&Tensor::from_vec(logits, &[3, k]));
        assert!(close(loss.item(), 0.0, 1e-5));
        assert!(loss.item() > -(k as f32).ln());
    }

    #[test]
    fn composites_weight_components() {
        let im = Tensor::scalar(0.5);
        let tr = Tensor::scalar(0.2);
        let sr = Tensor::scalar(0.3);
        let (total, report) =
            target_composite(&im, 0.5, 0.0, Some(&tr), Some(&sr), 1.0, 1.0, 8);
        assert!(close(total.item(), 1.0, 1e-6));
        assert_eq!(report.batch_size, 8);
        // alpha = beta = 0 reduces to IM alone
        let (only_im, _) = target_composite(&im, 0.5, 0.0, Some(&tr), Some(&sr), 0.0, 0.0, 8);
        assert!(close(only_im.item(), 0.5, 1e-6));
        // report total equals weighted sum of components
        let s: f32 = report.components["im"] + report.components["tr"] + report.components["sr"];
        assert!(close(report.total, s, 1e-6));
    }

    #[test]
    fn eta_zero_equals_plain_cross_entropy() {
        let logits = Tensor::from_vec(vec![0.3, -0.7, 1.2, 0.1, 0.0, -0.4], &[2, 3]);
        let smoothed = cls_loss(&logits, &[2, 0], 0.0).unwrap().item();
        // plain CE computed directly
        let p = logits.softmax_rows().to_vec();
        let expect = -((p[2] + EPS_LOG).ln() + (p[3] + EPS_LOG).ln()) / 2.0;
        assert!(close(smoothed, expect, 1e-6));
    }
}
