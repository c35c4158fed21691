//! Classification metrics: confusion matrix and macro F1.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::tensor::Tensor;

/// Row-wise argmax of `[B, K]` logits (first index wins ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<i64> {
    let sh = logits.shape();
    assert_eq!(sh.len(), 2, "argmax_rows expects 2-D logits, got {sh:?}");
    let (b, k) = (sh[0], sh[1]);
    logits.with_data(|d| {
        (0..b)
            .map(|r| {
                let row = &d[r * k..(r + 1) * k];
                let mut best = 0usize;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best as i64
            })
            .collect()
    })
}

/// Evaluation summary for one prediction set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][pred]` counts; row sums equal per-class test counts.
    pub confusion: Vec<Vec<u64>>,
}

/// Per-class F1 (`2PR/(P+R)`, `0/0 -> 0`) averaged over classes. A class
/// with zero instances and zero predictions is excluded from the mean;
/// any class that appears in labels or predictions contributes (possibly
/// zero) to it.
pub fn macro_f1(preds: &[i64], labels: &[i64], k: usize) -> Result<EvalResult, ConfigError> {
    if preds.len() != labels.len() {
        return Err(ConfigError::new(format!(
            "prediction/label length mismatch: {} vs {}",
            preds.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (i, (&p, &y)) in preds.iter().zip(labels).enumerate() {
        if p < 0 || p >= k as i64 {
            return Err(ConfigError::new(format!(
                "prediction {p} at index {i} out of range [0, {k})"
            )));
        }
        if y < 0 || y >= k as i64 {
            return Err(ConfigError::new(format!(
                "label {y} at index {i} out of range [0, {k})"
            )));
        }
        confusion[y as usize][p as usize] += 1;
    }

    let mut per_class_f1 = vec![0.0f64; k];
    let mut included = 0usize;
    let mut sum = 0.0f64;
    for c in 0..k {
        let tp = confusion[c][c];
        let instances: u64 = confusion[c].iter().sum();
        let predicted: u64 = (0..k).map(|r| confusion[r][c]).sum();
        if instances == 0 && predicted == 0 {
            continue;
        }
        included += 1;
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let recall = if instances > 0 { tp as f64 / instances as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class_f1[c] = f1;
        sum += f1;
    }
    let macro_f1 = if included > 0 { sum / included as f64 } else { 0.0 };
    Ok(EvalResult {
        macro_f1,
        per_class_f1,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let labels = vec![0, 1, 2, 0, 1, 2];
        let r = macro_f1(&labels, &labels, 3).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.per_class_f1, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn hand_confusion_case() {
        // labels [0,0,1,1], preds [0,1,1,1]:
        // class0 P=1, R=1/2 -> F1=2/3; class1 P=2/3, R=1 -> F1=4/5
        let r = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((r.per_class_f1[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class_f1[1] - 0.8).abs() < 1e-12);
        assert!((r.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rows_sum_to_class_counts() {
        let labels = vec![0, 0, 1, 2, 2, 2];
        let preds = vec![0, 1, 1, 0, 2, 2];
        let r = macro_f1(&preds, &labels, 3).unwrap();
        let row_sums: Vec<u64> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(row_sums, vec![2, 1, 3]);
    }

    #[test]
    fn absent_and_never_predicted_class_is_excluded() {
        // class 2 never appears: macro over classes 0 and 1 only
        let r = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.per_class_f1[2], 0.0);
    }

    #[test]
    fn predicted_but_absent_class_counts_as_zero() {
        // class 2 predicted once but has no instances: included with F1=0
        let r = macro_f1(&[0, 2], &[0, 0], 3).unwrap();
        assert!((r.macro_f1 - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn matches_bruteforce_oracle_on_random_instances() {
        // brute-force per-class counting as an independent reference
        let mut rng = crate::rng::SeedRng::new(99);
        for _ in 0..100 {
            let k = 2 + rng.below(5);
            let n = 1 + rng.below(40);
            let labels: Vec<i64> = (0..n).map(|_| rng.below(k) as i64).collect();
            let preds: Vec<i64> = (0..n).map(|_| rng.below(k) as i64).collect();
            let fast = macro_f1(&preds, &labels, k).unwrap();

            let mut sum = 0.0f64;
            let mut included = 0;
            for c in 0..k as i64 {
                let tp = labels
                    .iter()
                    .zip(&preds)
                    .filter(|(&y, &p)| y == c && p == c)
                    .count() as f64;
                let fp = labels
                    .iter()
                    .zip(&preds)
                    .filter(|(&y, &p)| y != c && p == c)
                    .count() as f64;
                let fn_ = labels
                    .iter()
                    .zip(&preds)
                    .filter(|(&y, &p)| y == c && p != c)
                    .count() as f64;
                if tp + fp + fn_ == 0.0 {
                    continue;
                }
                included += 1;
                let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            }
            let oracle = if included > 0 { sum / included as f64 } else { 0.0 };
            assert!(
                (fast.macro_f1 - oracle).abs() < 1e-12,
                "macro mismatch: {} vs oracle {}",
                fast.macro_f1,
                oracle
            );
        }
    }
}
