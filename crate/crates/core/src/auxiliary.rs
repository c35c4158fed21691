//! Masking strategies and the two auxiliary heads: the temporal
//! restoration network `t` (single-layer LSTM over the node axis plus an
//! output projection) and the spatial rewiring network `s` (one GNN layer
//! followed by a cosine Gram matrix).

use crate::encoder::gnn_propagate;
use crate::error::ConfigError;
use crate::rng::SeedRng;
use crate::tensor::{concat, Tensor};

/// Which timestamp segments were zeroed, per sample.
#[derive(Debug, Clone)]
pub struct TemporalMaskSpec {
    pub num_segments: usize,
    pub mask_ratio: f32,
    pub masked_segment_ids: Vec<Vec<usize>>,
}

/// Zero `round(ratio * num_segments)` segments per sample across all
/// channels. Segments tile `[0, L)` without overlap, so `L` must divide
/// evenly. The input tensor is untouched; the masked copy is a fresh leaf.
pub fn temporal_mask(
    x: &Tensor,
    ratio: f32,
    num_segments: usize,
    rng: &mut SeedRng,
) -> Result<(Tensor, TemporalMaskSpec), ConfigError> {
    let sh = x.shape();
    assert_eq!(sh.len(), 3, "temporal_mask expects [B, N, L], got {sh:?}");
    let (b, n, l) = (sh[0], sh[1], sh[2]);
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(ConfigError::new(format!(
            "temporal mask ratio must be in (0, 1), got {ratio}"
        )));
    }
    if num_segments == 0 || l % num_segments != 0 {
        return Err(ConfigError::new(format!(
            "sequence length {l} not divisible into {num_segments} segments"
        )));
    }
    let per_sample = (ratio * num_segments as f32).round() as usize;
    if per_sample == 0 {
        return Err(ConfigError::new(format!(
            "mask selects nothing: ratio {ratio} over {num_segments} segments rounds to 0"
        )));
    }
    let seg_len = l / num_segments;
    let mut data = x.to_vec();
    let mut ids = Vec::with_capacity(b);
    for bi in 0..b {
        let picked = rng.sample_indices(num_segments, per_sample);
        for &seg in &picked {
            let (start, end) = (seg * seg_len, (seg + 1) * seg_len);
            for ch in 0..n {
                let base = (bi * n + ch) * l;
                data[base + start..base + end].fill(0.0);
            }
        }
        ids.push(picked);
    }
    Ok((
        Tensor::from_vec(data, sh),
        TemporalMaskSpec {
            num_segments,
            mask_ratio: ratio,
            masked_segment_ids: ids,
        },
    ))
}

/// Which undirected edges were zeroed, per sample.
#[derive(Debug, Clone)]
pub struct SpatialMaskSpec {
    pub mask_ratio: f32,
    pub dropped_edges: Vec<Vec<(usize, usize)>>,
    /// Samples whose adjacency had no positive off-diagonal entries and
    /// were left unchanged.
    pub skipped_samples: usize,
}

/// Symmetrically zero `round(ratio * candidates)` undirected edges per
/// sample, where candidates are strictly positive off-diagonal pairs. The
/// diagonal is never masked. Returns `adj * mask`, so adaptation gradients
/// flow through the surviving entries.
pub fn spatial_mask(
    adj: &Tensor,
    ratio: f32,
    rng: &mut SeedRng,
) -> Result<(Tensor, SpatialMaskSpec), ConfigError> {
    let sh = adj.shape();
    assert_eq!(sh.len(), 3, "spatial_mask expects [B, N, N], got {sh:?}");
    assert_eq!(sh[1], sh[2], "spatial_mask expects square per-sample matrices, got {sh:?}");
    let (b, n) = (sh[0], sh[1]);
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(ConfigError::new(format!(
            "spatial mask ratio must be in (0, 1), got {ratio}"
        )));
    }
    let mut mask = vec![1.0f32; b * n * n];
    let mut dropped = Vec::with_capacity(b);
    let mut skipped = 0usize;
    adj.with_data(|a| {
        for bi in 0..b {
            let base = bi * n * n;
            let mut candidates = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if a[base + i * n + j] > 0.0 {
                        candidates.push((i, j));
                    }
                }
            }
            if candidates.is_empty() {
                skipped += 1;
                dropped.push(Vec::new());
                continue;
            }
            let k = (ratio * candidates.len() as f32).round() as usize;
            let picked = rng.sample_indices(candidates.len(), k);
            let edges: Vec<(usize, usize)> = picked.iter().map(|&p| candidates[p]).collect();
            for &(i, j) in &edges {
                mask[base + i * n + j] = 0.0;
                mask[base + j * n + i] = 0.0;
            }
            dropped.push(edges);
        }
    });
    let masked = adj.mul(&Tensor::from_vec(mask, sh));
    Ok((
        masked,
        SpatialMaskSpec {
            mask_ratio: ratio,
            dropped_edges: dropped,
            skipped_samples: skipped,
        },
    ))
}

/// Temporal restoration network `t`: a single LSTM layer consuming the N
/// node embeddings as a sequence (channel order), with a linear projection
/// per step back to the embedding dimension.
pub struct RestorationNet {
    pub dim: usize,
    // gate order: input, forget, cell, output
    wx: [Tensor; 4],
    wh: [Tensor; 4],
    bias: [Tensor; 4],
    w_out: Tensor,
    b_out: Tensor,
}

const GATE_NAMES: [&str; 4] = ["i", "f", "g", "o"];

impl RestorationNet {
    pub fn new(dim: usize, rng: &mut SeedRng) -> Self {
        let bound = 1.0 / (dim as f32).sqrt();
        let mat = |rng: &mut SeedRng| {
            let mut w = vec![0.0f32; dim * dim];
            rng.fill_uniform(&mut w, bound);
            Tensor::param(w, &[dim, dim])
        };
        let wx = [mat(rng), mat(rng), mat(rng), mat(rng)];
        let wh = [mat(rng), mat(rng), mat(rng), mat(rng)];
        let bias = std::array::from_fn(|_| Tensor::param(vec![0.0; dim], &[dim]));
        let w_out = mat(rng);
        RestorationNet {
            dim,
            wx,
            wh,
            bias,
            w_out,
            b_out: Tensor::param(vec![0.0; dim], &[dim]),
        }
    }

    /// `[B, N, D] -> [B, N, D]`.
    pub fn forward(&self, h: &Tensor) -> Tensor {
        let sh = h.shape();
        assert_eq!(sh.len(), 3, "restoration input must be [B, N, D], got {sh:?}");
        assert_eq!(sh[2], self.dim, "restoration dim mismatch: input {sh:?}, net dim {}", self.dim);
        let (b, n) = (sh[0], sh[1]);
        let mut hidden = Tensor::zeros(&[b, self.dim]);
        let mut cell = Tensor::zeros(&[b, self.dim]);
        let mut steps = Vec::with_capacity(n);
        for t in 0..n {
            let x_t = h.index_axis1(t);
            let gate = |idx: usize| {
                x_t.matmul(&self.wx[idx])
                    .add(&hidden.matmul(&self.wh[idx]))
                    .add_bias(&self.bias[idx])
            };
            let i = gate(0).sigmoid();
            let f = gate(1).sigmoid();
            let g = gate(2).tanh();
            let o = gate(3).sigmoid();
            cell = f.mul(&cell).add(&i.mul(&g));
            hidden = o.mul(&cell.tanh());
            let out_t = hidden.matmul(&self.w_out).add_bias(&self.b_out);
            steps.push(out_t.reshape(&[b, 1, self.dim]));
        }
        concat(&steps, 1)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, name) in GATE_NAMES.iter().enumerate() {
            out.push((format!("restoration.wx_{name}"), self.wx[k].clone()));
            out.push((format!("restoration.wh_{name}"), self.wh[k].clone()));
            out.push((format!("restoration.bias_{name}"), self.bias[k].clone()));
        }
        out.push(("restoration.w_out".into(), self.w_out.clone()));
        out.push(("restoration.b_out".into(), self.b_out.clone()));
        out
    }
}

/// Spatial rewiring network `s`: one GNN layer over the masked adjacency,
/// then row-normalized pairwise similarity. No ReLU on the output, so
/// entries lie in [-1, 1] with a unit diagonal on nonzero rows.
pub struct RewiringNet {
    pub weight: Tensor,
    pub slope: Tensor,
}

impl RewiringNet {
    pub fn new(dim: usize, rng: &mut SeedRng) -> Self {
        let bound = 1.0 / (dim as f32).sqrt();
        let mut w = vec![0.0f32; dim * dim];
        rng.fill_uniform(&mut w, bound);
        RewiringNet {
            weight: Tensor::param(w, &[dim, dim]),
            slope: Tensor::param(vec![0.25], &[1]),
        }
    }

    /// `(H'' [B, N, D], A' [B, N, N]) -> rewired adjacency [B, N, N]`.
    pub fn forward(&self, h_masked_graph: &Tensor, a_masked: &Tensor) -> Tensor {
        let z_hat = gnn_propagate(h_masked_graph, a_masked, &self.weight, &self.slope);
        let zn = z_hat.l2_normalize_rows();
        zn.bmm_nt(&zn)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("rewiring.weight".into(), self.weight.clone()),
            ("rewiring.slope".into(), self.slope.clone()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temporal_mask_zeroes_exact_fraction() {
        let mut rng = SeedRng::new(5);
        let x = Tensor::from_vec(vec![1.0; 4 * 3 * 128], &[4, 3, 128]);
        let (masked, spec) = temporal_mask(&x, 0.125, 8, &mut rng).unwrap();
        let zeros = masked.to_vec().iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeros, 4 * 3 * 16, "1/8 of 128 timestamps per channel");
        for ids in &spec.masked_segment_ids {
            assert_eq!(ids.len(), 1);
        }
    }

    #[test]
    fn temporal_mask_preserves_unmasked_values() {
        let mut rng = SeedRng::new(6);
        let vals: Vec<f32> = (0..2 * 2 * 16).map(|i| i as f32 + 1.0).collect();
        let x = Tensor::from_vec(vals.clone(), &[2, 2, 16]);
        let (masked, spec) = temporal_mask(&x, 0.25, 4, &mut rng).unwrap();
        let m = masked.to_vec();
        let seg_len = 4;
        for bi in 0..2 {
            for ch in 0..2 {
                for t in 0..16 {
                    let seg = t / seg_len;
                    let idx = (bi * 2 + ch) * 16 + t;
                    if spec.masked_segment_ids[bi].contains(&seg) {
                        assert_eq!(m[idx], 0.0);
                    } else {
                        assert_eq!(m[idx], vals[idx], "unmasked values must be bit-identical");
                    }
                }
            }
        }
        // original untouched
        assert_eq!(x.to_vec(), vals);
    }

    #[test]
    fn temporal_mask_rejects_vanishing_ratio() {
        let mut rng = SeedRng::new(7);
        let x = Tensor::from_vec(vec![1.0; 16], &[1, 1, 16]);
        let err = temporal_mask(&x, 0.05, 8, &mut rng).unwrap_err();
        assert!(err.to_string().contains("mask selects nothing"));
    }

    #[test]
    fn spatial_mask_counts_and_symmetry() {
        let mut rng = SeedRng::new(8);
        // dense positive 9-node graph: 36 candidate pairs, ratio 0.5 -> 18 dropped
        let n = 9;
        let adj = Tensor::from_vec(vec![0.5; n * n], &[1, n, n]);
        let (masked, spec) = spatial_mask(&adj, 0.5, &mut rng).unwrap();
        assert_eq!(spec.dropped_edges[0].len(), 18);
        let m = masked.to_vec();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(m[i * n + j], m[j * n + i], "masked adjacency must stay symmetric");
            }
            assert_eq!(m[i * n + i], 0.5, "diagonal never masked");
        }
    }

    #[test]
    fn spatial_mask_skips_disconnected_sample() {
        let mut rng = SeedRng::new(9);
        let eye = crate::encoder::identity_adjacency(1, 4);
        let (masked, spec) = spatial_mask(&eye, 0.5, &mut rng).unwrap();
        assert_eq!(spec.skipped_samples, 1);
        assert!(spec.dropped_edges[0].is_empty());
        assert_eq!(masked.to_vec(), eye.to_vec());
    }

    #[test]
    fn restoration_zero_params_zero_input_is_zero() {
        let mut rng = SeedRng::new(10);
        let net = RestorationNet::new(8, &mut rng);
        for (_, p) in net.named_params() {
            p.set_data(&vec![0.0; p.numel()]);
        }
        let h = Tensor::zeros(&[2, 3, 8]);
        let out = net.forward(&h);
        assert_eq!(out.shape(), &[2, 3, 8]);
        assert!(out.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rewiring_identical_rows_give_all_ones() {
        let mut rng = SeedRng::new(11);
        let net = RewiringNet::new(4, &mut rng);
        let h = Tensor::from_vec(vec![0.5; 1 * 3 * 4], &[1, 3, 4]);
        let adj = Tensor::from_vec(vec![1.0; 9], &[1, 3, 3]);
        let out = net.forward(&h, &adj);
        for v in out.to_vec() {
            assert!((v - 1.0).abs() < 1e-5, "cosine of equal rows is 1, got {v}");
        }
    }

    #[test]
    fn rewiring_output_symmetric_unit_diagonal() {
        let mut rng = SeedRng::new(12);
        let net = RewiringNet::new(6, &mut rng);
        let mut h_data = vec![0.0f32; 2 * 4 * 6];
        rng.fill_uniform(&mut h_data, 1.0);
        let h = Tensor::from_vec(h_data, &[2, 4, 6]);
        let mut a_data = vec![0.0f32; 2 * 16];
        rng.fill_uniform(&mut a_data, 1.0);
        a_data.iter_mut().for_each(|v| *v = v.abs());
        // symmetrize
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..i {
                    let (lo, hi) = (b * 16 + i * 4 + j, b * 16 + j * 4 + i);
                    a_data[lo] = a_data[hi];
                }
            }
        }
        let adj = Tensor::from_vec(a_data, &[2, 4, 4]);
        let out = net.forward(&h, &adj);
        let v = out.to_vec();
        for b in 0..2 {
            for i in 0..4 {
                assert!((v[b * 16 + i * 4 + i] - 1.0).abs() < 1e-5);
                for j in 0..4 {
                    assert!((v[b * 16 + i * 4 + j] - v[b * 16 + j * 4 + i]).abs() < 1e-6);
                    assert!(v[b * 16 + i * 4 + j] <= 1.0 + 1e-5);
                    assert!(v[b * 16 + i * 4 + j] >= -1.0 - 1e-5);
                }
            }
        }
    }
}
