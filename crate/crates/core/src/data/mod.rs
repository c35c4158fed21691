//! Dataset model: metadata, split payloads, binary format IO, CSV import,
//! per-channel normalization, and the synthetic domain-shift generator.

mod csv_import;
mod synth;
mod tsdf;

pub use csv_import::{import_csv, ImportSpec};
pub use synth::{synth_domains, DomainTransform, ShiftSpec, SineComponent};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {0}: not a .tsdf file")]
    BadMagic(String),
    #[error("unsupported .tsdf version {0}")]
    UnsupportedVersion(u16),
    #[error("header of {path} fails sanity bounds: {detail}")]
    HeaderBounds { path: String, detail: String },
    #[error("{path} truncated: expected {expected} bytes after header, found {actual}")]
    Truncated {
        path: String,
        expected: u64,
        actual: u64,
    },
    #[error("meta.json parse error: {0}")]
    MetaParse(#[from] serde_json::Error),
    #[error("split '{split}': meta declares {meta} samples, file holds {file}")]
    CountMismatch {
        split: String,
        meta: usize,
        file: usize,
    },
    #[error("split '{split}': dims [{channels}, {length}] do not match meta [{meta_channels}, {meta_length}]")]
    DimsMismatch {
        split: String,
        channels: usize,
        length: usize,
        meta_channels: usize,
        meta_length: usize,
    },
    #[error("label {label} at sample {index} out of range [0, {classes})")]
    LabelOutOfRange {
        index: usize,
        label: i64,
        classes: usize,
    },
    #[error("missing split file: {0}")]
    MissingSplit(String),
    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("sample {sample_id} channel {channel}: expected {expected} timestamps, found {found}")]
    RaggedSample {
        sample_id: i64,
        channel: usize,
        expected: usize,
        found: usize,
    },
    #[error("sample {sample_id}: missing channel {channel}")]
    MissingChannel { sample_id: i64, channel: usize },
    #[error("sample {sample_id}: duplicate value at channel {channel}, t={t}")]
    DuplicateCell { sample_id: i64, channel: usize, t: usize },
    #[error("sample {sample_id}: no label in labels csv")]
    MissingLabel { sample_id: i64 },
    #[error("csv field error at line {line}: {detail}")]
    Field { line: u64, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Dataset description stored as `meta.json` next to the split files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub channels: usize,
    pub classes: usize,
    pub length: usize,
    pub splits: BTreeMap<String, usize>,
    pub created_by: String,
    pub format_version: u16,
}

/// One split: row-major `[B, N, L]` values plus optional labels.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub channels: usize,
    pub seq_len: usize,
    pub values: Vec<f32>,
    pub labels: Option<Vec<i64>>,
}

impl SplitData {
    pub fn new(channels: usize, seq_len: usize, values: Vec<f32>, labels: Option<Vec<i64>>) -> Self {
        assert_eq!(values.len() % (channels * seq_len), 0, "ragged split payload");
        if let Some(l) = &labels {
            assert_eq!(l.len() * channels * seq_len, values.len(), "label count mismatch");
        }
        SplitData {
            channels,
            seq_len,
            values,
            labels,
        }
    }

    pub fn samples(&self) -> usize {
        if self.channels * self.seq_len == 0 {
            0
        } else {
            self.values.len() / (self.channels * self.seq_len)
        }
    }

    fn sample_stride(&self) -> usize {
        self.channels * self.seq_len
    }

    /// Gather the given sample indices into a `[b, N, L]` tensor.
    pub fn batch_values(&self, indices: &[usize]) -> Tensor {
        let stride = self.sample_stride();
        let mut out = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            out.extend_from_slice(&self.values[i * stride..(i + 1) * stride]);
        }
        Tensor::from_vec(out, &[indices.len(), self.channels, self.seq_len])
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Option<Vec<i64>> {
        self.labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect())
    }

    /// Label-free view of the same payload. Adaptation code accepts only
    /// this type, so target labels cannot leak into stage two.
    pub fn unlabeled(&self) -> UnlabeledData<'_> {
        UnlabeledData { split: self }
    }
}

/// View over a split with labels statically inaccessible.
#[derive(Clone, Copy)]
pub struct UnlabeledData<'a> {
    split: &'a SplitData,
}

impl<'a> UnlabeledData<'a> {
    pub fn samples(&self) -> usize {
        self.split.samples()
    }

    pub fn channels(&self) -> usize {
        self.split.channels
    }

    pub fn seq_len(&self) -> usize {
        self.split.seq_len
    }

    pub fn batch_values(&self, indices: &[usize]) -> Tensor {
        self.split.batch_values(indices)
    }
}

/// A directory-backed dataset: `meta.json` plus one `.tsdf` per split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub splits: BTreeMap<String, SplitData>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&SplitData, DataError> {
        self.splits
            .get(name)
            .ok_or_else(|| DataError::MissingSplit(name.to_string()))
    }
}

/// Load and validate a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta_path = dir.join("meta.json");
    let meta_raw = fs::read(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_raw)?;

    let mut splits = BTreeMap::new();
    for (split_name, &count) in &meta.splits {
        let path = dir.join(format!("{split_name}.tsdf"));
        if !path.exists() {
            return Err(DataError::MissingSplit(path.display().to_string()));
        }
        let split = tsdf::read_tsdf(&path)?;
        if split.samples() != count {
            return Err(DataError::CountMismatch {
                split: split_name.clone(),
                meta: count,
                file: split.samples(),
            });
        }
        if count > 0 && (split.channels != meta.channels || split.seq_len != meta.length) {
            return Err(DataError::DimsMismatch {
                split: split_name.clone(),
                channels: split.channels,
                length: split.seq_len,
                meta_channels: meta.channels,
                meta_length: meta.length,
            });
        }
        if let Some(labels) = &split.labels {
            for (i, &label) in labels.iter().enumerate() {
                if label < 0 || label >= meta.classes as i64 {
                    return Err(DataError::LabelOutOfRange {
                        index: i,
                        label,
                        classes: meta.classes,
                    });
                }
            }
        }
        splits.insert(split_name.clone(), split);
    }
    Ok(Dataset { meta, splits })
}

/// Write a dataset directory (meta.json + one .tsdf per split).
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta_path = dir.join("meta.json");
    let meta_json = serde_json::to_vec_pretty(&dataset.meta)?;
    fs::write(&meta_path, meta_json).map_err(|e| io_err(&meta_path, e))?;
    for (name, split) in &dataset.splits {
        let path = dir.join(format!("{name}.tsdf"));
        tsdf::write_tsdf(&path, split)?;
    }
    Ok(())
}

/// Per-channel z-score statistics. The standard deviation is floored at
/// 1e-6 so constant channels normalize to zero instead of NaN.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub fn fit_stats(split: &SplitData) -> ChannelStats {
    let (n, l) = (split.channels, split.seq_len);
    let b = split.samples();
    let mut mean = vec![0.0f64; n];
    let mut std = vec![0.0f64; n];
    let count = (b * l).max(1) as f64;
    for bi in 0..b {
        for c in 0..n {
            let base = (bi * n + c) * l;
            for t in 0..l {
                mean[c] += split.values[base + t] as f64;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for bi in 0..b {
        for c in 0..n {
            let base = (bi * n + c) * l;
            for t in 0..l {
                let d = split.values[base + t] as f64 - mean[c];
                std[c] += d * d;
            }
        }
    }
    ChannelStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: std
            .iter()
            .map(|&s| ((s / count).sqrt() as f32).max(1e-6))
            .collect(),
    }
}

/// Z-score in place with the given stats, or stats fit on this split.
/// Returns the stats used, so fitting-split statistics can be reused on
/// sibling splits of the same domain (never across domains).
pub fn normalize(split: &mut SplitData, stats: Option<&ChannelStats>) -> ChannelStats {
    let fitted;
    let stats = match stats {
        Some(s) => s,
        None => {
            fitted = fit_stats(split);
            &fitted
        }
    };
    let (n, l) = (split.channels, split.seq_len);
    for bi in 0..split.samples() {
        for c in 0..n {
            let base = (bi * n + c) * l;
            for t in 0..l {
                split.values[base + t] = (split.values[base + t] - stats.mean[c]) / stats.std[c];
            }
        }
    }
    stats.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_split() -> SplitData {
        // 2 samples, 2 channels, 3 steps
        SplitData::new(
            2,
            3,
            vec![
                1.0, 2.0, 3.0, 5.0, 5.0, 5.0, //
                4.0, 5.0, 6.0, 5.0, 5.0, 5.0,
            ],
            Some(vec![0, 1]),
        )
    }

    #[test]
    fn roundtrip_save_load_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let split = toy_split();
        let mut splits = BTreeMap::new();
        splits.insert("train".to_string(), split.clone());
        let dataset = Dataset {
            meta: DatasetMeta {
                name: "toy".into(),
                channels: 2,
                classes: 2,
                length: 3,
                splits: BTreeMap::from([("train".to_string(), 2)]),
                created_by: "test".into(),
                format_version: 1,
            },
            splits,
        };
        save_dataset(dir.path(), &dataset).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let got = loaded.split("train").unwrap();
        assert_eq!(got.values, split.values);
        assert_eq!(got.labels, split.labels);
    }

    #[test]
    fn empty_split_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = Dataset {
            meta: DatasetMeta {
                name: "empty".into(),
                channels: 2,
                classes: 2,
                length: 3,
                splits: BTreeMap::from([("test".to_string(), 0)]),
                created_by: "test".into(),
                format_version: 1,
            },
            splits: BTreeMap::from([(
                "test".to_string(),
                SplitData::new(2, 3, Vec::new(), None),
            )]),
        };
        save_dataset(dir.path(), &dataset).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.split("test").unwrap().samples(), 0);
    }

    #[test]
    fn out_of_range_label_is_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut split = toy_split();
        split.labels = Some(vec![0, 7]);
        let dataset = Dataset {
            meta: DatasetMeta {
                name: "bad".into(),
                channels: 2,
                classes: 2,
                length: 3,
                splits: BTreeMap::from([("train".to_string(), 2)]),
                created_by: "test".into(),
                format_version: 1,
            },
            splits: BTreeMap::from([("train".to_string(), split)]),
        };
        save_dataset(dir.path(), &dataset).unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::LabelOutOfRange { index: 1, label: 7, classes: 2 }) => {}
            other => panic!("expected LabelOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn normalize_zscores_per_channel() {
        let mut split = toy_split();
        let stats = normalize(&mut split, None);
        // channel 0 of both samples: values 1..6 -> mean 0 after z-score
        let (n, l) = (2, 3);
        let mut mean_c0 = 0.0f32;
        for bi in 0..2 {
            for t in 0..l {
                mean_c0 += split.values[(bi * n) * l + t];
            }
        }
        assert!(mean_c0.abs() / 6.0 < 1e-5);
        // constant channel 1 normalizes to all zeros, no NaN
        for bi in 0..2 {
            for t in 0..l {
                assert_eq!(split.values[(bi * n + 1) * l + t], 0.0);
            }
        }
        assert!(stats.std[1] >= 1e-6);
    }

    #[test]
    fn train_stats_applied_to_shifted_test_leave_nonzero_mean() {
        let mut train = toy_split();
        let stats = normalize(&mut train, None);
        let mut test = SplitData::new(
            2,
            3,
            vec![
                11.0, 12.0, 13.0, 5.0, 5.0, 5.0, //
                14.0, 15.0, 16.0, 5.0, 5.0, 5.0,
            ],
            None,
        );
        normalize(&mut test, Some(&stats));
        let mut mean_c0 = 0.0f32;
        for bi in 0..2 {
            for t in 0..3 {
                mean_c0 += test.values[(bi * 2) * 3 + t];
            }
        }
        assert!(mean_c0 / 6.0 > 1.0, "shifted test set must not be centered by train stats");
    }
}
