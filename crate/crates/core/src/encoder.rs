//! Spatial-temporal feature encoder and linear classifier.
//!
//! The encoder is three stages: a per-channel temporal CNN with shared
//! weights, a cosine-similarity graph learner, and a one-layer GNN with
//! symmetric degree normalization. Channel permutation therefore permutes
//! channel features, conjugates the adjacency, and permutes node embeddings.

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::rng::SeedRng;
use crate::tensor::{batchnorm1d, Tensor};

/// GNN output dimension D.
pub const EMBED_DIM: usize = 256;
/// Filter counts of the three CNN layers.
pub const CNN_FILTERS: [usize; 3] = [64, 128, 128];
/// Kernel sizes of the three CNN layers (padded with `k/2`).
pub const CNN_KERNELS: [usize; 3] = [8, 5, 3];

const BN_MOMENTUM: f32 = 0.1;
const BN_EPS: f32 = 1e-5;

/// Which stages of the encoder are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// CNN -> graph learner -> GNN.
    Full,
    /// CNN features with an identity adjacency: no cross-channel mixing.
    TemporalOnly,
    /// Graph learner + GNN applied directly to the raw signal (no CNN).
    SpatialOnly,
}

impl Default for EncoderVariant {
    fn default() -> Self {
        EncoderVariant::Full
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub variant: EncoderVariant,
}

impl EncoderConfig {
    pub fn new(channels: usize, seq_len: usize, num_classes: usize) -> Self {
        EncoderConfig {
            channels,
            seq_len,
            num_classes,
            variant: EncoderVariant::Full,
        }
    }

    pub fn with_variant(mut self, variant: EncoderVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Per-channel feature width F entering the graph stage.
    pub fn feature_dim(&self) -> usize {
        match self.variant {
            EncoderVariant::SpatialOnly => self.seq_len,
            _ => CNN_FILTERS[2],
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.channels == 0 || self.seq_len == 0 || self.num_classes == 0 {
            return Err(ConfigError::new(format!(
                "encoder dims must be positive: channels={} seq_len={} classes={}",
                self.channels, self.seq_len, self.num_classes
            )));
        }
        if self.variant != EncoderVariant::SpatialOnly && self.seq_len < 8 {
            return Err(ConfigError::new(format!(
                "sequence length {} too short for the three pool-by-2 stages (need >= 8)",
                self.seq_len
            )));
        }
        Ok(())
    }
}

/// Batch normalization layer state. Running statistics are plain buffers
/// mutated by train-mode forwards, outside the autodiff graph.
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Rc<RefCell<Vec<f32>>>,
    pub running_var: Rc<RefCell<Vec<f32>>>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::param(vec![1.0; channels], &[channels]),
            beta: Tensor::param(vec![0.0; channels], &[channels]),
            running_mean: Rc::new(RefCell::new(vec![0.0; channels])),
            running_var: Rc::new(RefCell::new(vec![1.0; channels])),
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        batchnorm1d(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            BN_MOMENTUM,
            BN_EPS,
            train,
        )
    }
}

/// conv -> ReLU -> BN -> maxpool(2,2)
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: BatchNorm,
    kernel: usize,
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, kernel: usize, rng: &mut SeedRng) -> Self {
        let fan_in = cin * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut w = vec![0.0f32; cout * cin * kernel];
        rng.fill_uniform(&mut w, bound);
        ConvBlock {
            weight: Tensor::param(w, &[cout, cin, kernel]),
            bias: Tensor::param(vec![0.0; cout], &[cout]),
            bn: BatchNorm::new(cout),
            kernel,
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let y = x.conv1d(&self.weight, &self.bias, 1, self.kernel / 2).relu();
        self.bn.forward(&y, train).maxpool1d(2, 2)
    }
}

/// One GNN propagation step: symmetric degree normalization, linear
/// transform, PReLU. Zero-degree nodes get normalization coefficient 0.
pub fn gnn_propagate(z: &Tensor, adj: &Tensor, weight: &Tensor, slope: &Tensor) -> Tensor {
    let (b, n, f) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let d_out = weight.shape()[1];
    let deg = adj.sum_last();
    let coeff = deg.rsqrt_or_zero();
    let norm_adj = adj.scale_dim1(&coeff).scale_dim2(&coeff);
    let zw = z.reshape(&[b * n, f]).matmul(weight).reshape(&[b, n, d_out]);
    norm_adj.bmm(&zw).prelu(slope)
}

/// Cosine-similarity adjacency: rows of `z` are L2-normalized, the Gram
/// matrix is clipped by ReLU. Symmetric, entries in [0, 1], unit diagonal
/// for nonzero rows.
pub fn graph_learner(z: &Tensor) -> Tensor {
    let zn = z.l2_normalize_rows();
    zn.bmm_nt(&zn).relu()
}

pub struct EncodeOut {
    /// Per-channel temporal features `[B, N, F]`.
    pub z: Tensor,
    /// Learned adjacency `[B, N, N]`.
    pub a: Tensor,
    /// Node embeddings `[B, N, D]`.
    pub h: Tensor,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    pub blocks: Vec<ConvBlock>,
    pub gnn_weight: Tensor,
    pub gnn_slope: Tensor,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, rng: &mut SeedRng) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let blocks = match cfg.variant {
            EncoderVariant::SpatialOnly => Vec::new(),
            _ => {
                let mut blocks = Vec::new();
                let mut cin = 1;
                for (i, (&cout, &k)) in CNN_FILTERS.iter().zip(CNN_KERNELS.iter()).enumerate() {
                    let _ = i;
                    blocks.push(ConvBlock::new(cin, cout, k, rng));
                    cin = cout;
                }
                blocks
            }
        };
        let f = cfg.feature_dim();
        let bound = 1.0 / (f as f32).sqrt();
        let mut w = vec![0.0f32; f * EMBED_DIM];
        rng.fill_uniform(&mut w, bound);
        Ok(Encoder {
            cfg,
            blocks,
            gnn_weight: Tensor::param(w, &[f, EMBED_DIM]),
            gnn_slope: Tensor::param(vec![0.25], &[1]),
        })
    }

    /// Per-channel temporal features: channels share CNN weights via a
    /// reshape to `[B*N, 1, L]`; the time axis is average-pooled away.
    pub fn temporal_cnn(&self, x: &Tensor, train: bool) -> Tensor {
        let (b, n, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut y = x.reshape(&[b * n, 1, l]);
        for block in &self.blocks {
            y = block.forward(&y, train);
        }
        let f = y.shape()[1];
        y.mean_last().reshape(&[b, n, f])
    }

    pub fn spatial_gnn(&self, z: &Tensor, adj: &Tensor) -> Tensor {
        gnn_propagate(z, adj, &self.gnn_weight, &self.gnn_slope)
    }

    /// Full forward pass returning all intermediates (`z`, `a`, `h`).
    pub fn encode(&self, x: &Tensor, train: bool) -> EncodeOut {
        match self.cfg.variant {
            EncoderVariant::Full => {
                let z = self.temporal_cnn(x, train);
                let a = graph_learner(&z);
                let h = self.spatial_gnn(&z, &a);
                EncodeOut { z, a, h }
            }
            EncoderVariant::TemporalOnly => {
                let z = self.temporal_cnn(x, train);
                let a = identity_adjacency(x.shape()[0], self.cfg.channels);
                let h = self.spatial_gnn(&z, &a);
                EncodeOut { z, a, h }
            }
            EncoderVariant::SpatialOnly => {
                let z = x.reshape(x.shape());
                let a = graph_learner(&z);
                let h = self.spatial_gnn(&z, &a);
                EncodeOut { z, a, h }
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("encoder.cnn{i}.weight"), b.weight.clone()));
            out.push((format!("encoder.cnn{i}.bias"), b.bias.clone()));
            out.push((format!("encoder.cnn{i}.bn.gamma"), b.bn.gamma.clone()));
            out.push((format!("encoder.cnn{i}.bn.beta"), b.bn.beta.clone()));
        }
        out.push(("encoder.gnn.weight".into(), self.gnn_weight.clone()));
        out.push(("encoder.gnn.slope".into(), self.gnn_slope.clone()));
        out
    }

    /// Non-trainable state: BN running statistics.
    pub fn named_buffers(&self) -> Vec<(String, Rc<RefCell<Vec<f32>>>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("encoder.cnn{i}.bn.running_mean"), Rc::clone(&b.bn.running_mean)));
            out.push((format!("encoder.cnn{i}.bn.running_var"), Rc::clone(&b.bn.running_var)));
        }
        out
    }
}

/// Constant identity adjacency `[B, N, N]`.
pub fn identity_adjacency(batch: usize, n: usize) -> Tensor {
    let mut data = vec![0.0f32; batch * n * n];
    for b in 0..batch {
        for i in 0..n {
            data[(b * n + i) * n + i] = 1.0;
        }
    }
    Tensor::from_vec(data, &[batch, n, n])
}

/// Linear classifier over flattened node embeddings.
pub struct Classifier {
    pub weight: Tensor,
    pub bias: Tensor,
    pub in_dim: usize,
}

impl Classifier {
    pub fn new(channels: usize, embed_dim: usize, num_classes: usize, rng: &mut SeedRng) -> Self {
        let in_dim = channels * embed_dim;
        let bound = 1.0 / (in_dim as f32).sqrt();
        let mut w = vec![0.0f32; in_dim * num_classes];
        rng.fill_uniform(&mut w, bound);
        Classifier {
            weight: Tensor::param(w, &[in_dim, num_classes]),
            bias: Tensor::param(vec![0.0; num_classes], &[num_classes]),
            in_dim,
        }
    }

    /// `[B, N, D] -> [B, K]` logits.
    pub fn forward(&self, h: &Tensor) -> Tensor {
        let b = h.shape()[0];
        h.reshape(&[b, self.in_dim]).matmul(&self.weight).add_bias(&self.bias)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("classifier.weight".into(), self.weight.clone()),
            ("classifier.bias".into(), self.bias.clone()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_encoder(variant: EncoderVariant) -> Encoder {
        let cfg = EncoderConfig::new(4, 16, 3).with_variant(variant);
        Encoder::new(cfg, &mut SeedRng::new(1)).unwrap()
    }

    #[test]
    fn too_short_sequence_is_config_error() {
        let cfg = EncoderConfig::new(4, 4, 3);
        assert!(Encoder::new(cfg, &mut SeedRng::new(0)).is_err());
    }

    #[test]
    fn encode_shapes() {
        let enc = small_encoder(EncoderVariant::Full);
        let x = Tensor::from_vec(vec![0.3; 2 * 4 * 16], &[2, 4, 16]);
        let out = enc.encode(&x, true);
        assert_eq!(out.z.shape(), &[2, 4, 128]);
        assert_eq!(out.a.shape(), &[2, 4, 4]);
        assert_eq!(out.h.shape(), &[2, 4, EMBED_DIM]);
    }

    #[test]
    fn zero_input_stays_finite() {
        let enc = small_encoder(EncoderVariant::Full);
        let x = Tensor::zeros(&[2, 4, 16]);
        let out = enc.encode(&x, true);
        assert!(out.z.has_finite_values());
        assert!(out.a.has_finite_values());
        assert!(out.h.has_finite_values());
    }

    #[test]
    fn graph_learner_identical_rows_give_all_ones() {
        let z = Tensor::from_vec(vec![1.0, 2.0, 1.0, 2.0], &[1, 2, 2]);
        let a = graph_learner(&z);
        for v in a.to_vec() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn graph_learner_orthogonal_rows_give_identity() {
        let z = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[1, 2, 2]);
        let a = graph_learner(&z);
        assert_eq!(a.to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn graph_learner_clips_negative_cosine() {
        let z = Tensor::from_vec(vec![1.0, 0.0, -1.0, 0.0], &[1, 2, 2]);
        let a = graph_learner(&z);
        let v = a.to_vec();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn gnn_all_ones_adjacency_normalizes_to_half() {
        let adj = Tensor::from_vec(vec![1.0; 4], &[1, 2, 2]);
        let deg = adj.sum_last().rsqrt_or_zero();
        let norm = adj.scale_dim1(&deg).scale_dim2(&deg);
        for v in norm.to_vec() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn gnn_zero_degree_node_maps_to_zero_row() {
        // node 1 isolated
        let z = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let adj = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0], &[1, 2, 2]);
        let w = Tensor::param(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let slope = Tensor::param(vec![0.25], &[1]);
        let h = gnn_propagate(&z, &adj, &w, &slope);
        let v = h.to_vec();
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn classifier_zero_weights_return_bias() {
        let mut rng = SeedRng::new(2);
        let clf = Classifier::new(2, 3, 4, &mut rng);
        clf.weight.set_data(&vec![0.0; 2 * 3 * 4]);
        clf.bias.set_data(&[1.0, -1.0, 0.5, 2.0]);
        let h = Tensor::from_vec(vec![0.7; 2 * 2 * 3], &[2, 2, 3]);
        let logits = clf.forward(&h);
        let v = logits.to_vec();
        assert_eq!(&v[..4], &[1.0, -1.0, 0.5, 2.0]);
        assert_eq!(&v[4..], &[1.0, -1.0, 0.5, 2.0]);
    }

    #[test]
    fn channel_permutation_permutes_features_and_adjacency() {
        let enc = small_encoder(EncoderVariant::Full);
        let mut rng = SeedRng::new(9);
        let mut base = vec![0.0f32; 2 * 4 * 16];
        rng.fill_uniform(&mut base, 1.0);
        let x = Tensor::from_vec(base.clone(), &[2, 4, 16]);

        // swap channels 1 and 2
        let perm = [0usize, 2, 1, 3];
        let mut permuted = vec![0.0f32; base.len()];
        for b in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                let from = (b * 4 + src) * 16;
                let to = (b * 4 + dst) * 16;
                permuted[to..to + 16].copy_from_slice(&base[from..from + 16]);
            }
        }
        let xp = Tensor::from_vec(permuted, &[2, 4, 16]);

        let out = enc.encode(&x, false);
        let outp = enc.encode(&xp, false);

        let z = out.z.to_vec();
        let zp = outp.z.to_vec();
        for b in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                let from = (b * 4 + src) * 128;
                let to = (b * 4 + dst) * 128;
                for j in 0..128 {
                    assert!((z[from + j] - zp[to + j]).abs() < 1e-5);
                }
            }
        }
        let a = out.a.to_vec();
        let ap = outp.a.to_vec();
        for b in 0..2 {
            for (di, &si) in perm.iter().enumerate() {
                for (dj, &sj) in perm.iter().enumerate() {
                    let orig = (b * 4 + si) * 4 + sj;
                    let new = (b * 4 + di) * 4 + dj;
                    assert!((a[orig] - ap[new]).abs() < 1e-5);
                }
            }
        }
    }
}
