//! 1-D convolution (cross-correlation), max pooling, and batch
//! normalization over `[B, C, L]` inputs.
//!
//! Convolution lowers to im2col + one GEMM per sample; the column matrix
//! is saved for the backward pass.

use std::cell::RefCell;
use std::rc::Rc;

use super::linalg::gemm;
use super::Tensor;

impl Tensor {
    /// Cross-correlation with zero padding. `x: [B, Cin, L]`,
    /// `w: [Cout, Cin, K]`, `bias: [Cout]` -> `[B, Cout, Lout]` with
    /// `Lout = (L + 2*pad - K) / stride + 1`.
    pub fn conv1d(&self, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (sx, sw) = (self.shape(), w.shape());
        assert!(
            sx.len() == 3 && sw.len() == 3 && sx[1] == sw[1],
            "conv1d dimension mismatch: input {sx:?} weight {sw:?}"
        );
        assert!(stride >= 1, "conv1d stride must be >= 1");
        let (b, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        assert_eq!(bias.shape(), &[cout], "conv1d bias shape {:?} expected [{cout}]", bias.shape());
        assert!(
            l + 2 * pad >= k,
            "conv1d kernel larger than padded input: L={l} pad={pad} K={k}"
        );
        let lout = (l + 2 * pad - k) / stride + 1;
        let ck = cin * k;

        // im2col for every sample, kept for backward
        let mut cols = vec![0.0f32; b * ck * lout];
        {
            let x = self.inner.data.borrow();
            for bi in 0..b {
                let col = &mut cols[bi * ck * lout..(bi + 1) * ck * lout];
                for c in 0..cin {
                    let xrow = &x[(bi * cin + c) * l..(bi * cin + c + 1) * l];
                    for kk in 0..k {
                        let dst = (c * k + kk) * lout;
                        for j in 0..lout {
                            let src = (j * stride + kk) as isize - pad as isize;
                            col[dst + j] = if src >= 0 && (src as usize) < l {
                                xrow[src as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }

        let mut out = vec![0.0f32; b * cout * lout];
        {
            let wv = w.inner.data.borrow();
            let bias_v = bias.inner.data.borrow();
            for bi in 0..b {
                gemm(
                    cout,
                    ck,
                    lout,
                    1.0,
                    &wv,
                    false,
                    &cols[bi * ck * lout..(bi + 1) * ck * lout],
                    false,
                    0.0,
                    &mut out[bi * cout * lout..(bi + 1) * cout * lout],
                );
                for co in 0..cout {
                    let base = (bi * cout + co) * lout;
                    let bv = bias_v[co];
                    for j in 0..lout {
                        out[base + j] += bv;
                    }
                }
            }
        }

        let (px, pw, pb) = (self.clone(), w.clone(), bias.clone());
        let w_buf = w.buffer();
        let cols = Rc::new(cols);
        Tensor::from_op(
            out,
            vec![b, cout, lout],
            vec![self.clone(), w.clone(), bias.clone()],
            move |g| {
                pw.accum_grad(|gw| {
                    for bi in 0..b {
                        gemm(
                            cout,
                            lout,
                            ck,
                            1.0,
                            &g[bi * cout * lout..(bi + 1) * cout * lout],
                            false,
                            &cols[bi * ck * lout..(bi + 1) * ck * lout],
                            true,
                            1.0,
                            gw,
                        );
                    }
                });
                pb.accum_grad(|gb| {
                    for bi in 0..b {
                        for co in 0..cout {
                            let base = (bi * cout + co) * lout;
                            gb[co] += g[base..base + lout].iter().sum::<f32>();
                        }
                    }
                });
                if px.requires_grad() {
                    let wv = w_buf.borrow();
                    let mut dcol = vec![0.0f32; ck * lout];
                    px.accum_grad(|gx| {
                        for bi in 0..b {
                            gemm(
                                ck,
                                cout,
                                lout,
                                1.0,
                                &wv,
                                true,
                                &g[bi * cout * lout..(bi + 1) * cout * lout],
                                false,
                                0.0,
                                &mut dcol,
                            );
                            // col2im scatter
                            for c in 0..cin {
                                let xrow = (bi * cin + c) * l;
                                for kk in 0..k {
                                    let src = (c * k + kk) * lout;
                                    for j in 0..lout {
                                        let pos = (j * stride + kk) as isize - pad as isize;
                                        if pos >= 0 && (pos as usize) < l {
                                            gx[xrow + pos as usize] += dcol[src + j];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            },
        )
    }

    /// Max pooling over the last axis; the backward pass routes gradients
    /// to the argmax position of each window (first wins on ties).
    pub fn maxpool1d(&self, kernel: usize, stride: usize) -> Tensor {
        let sx = self.shape();
        assert_eq!(sx.len(), 3, "maxpool1d expects 3-D input, got {sx:?}");
        let (b, c, l) = (sx[0], sx[1], sx[2]);
        assert!(l >= kernel, "maxpool1d window {kernel} larger than length {l}");
        let lout = (l - kernel) / stride + 1;
        let mut out = vec![0.0f32; b * c * lout];
        let mut argmax = vec![0u32; b * c * lout];
        {
            let x = self.inner.data.borrow();
            for bc in 0..b * c {
                let row = &x[bc * l..(bc + 1) * l];
                for j in 0..lout {
                    let start = j * stride;
                    let mut best = start;
                    for t in start + 1..start + kernel {
                        if row[t] > row[best] {
                            best = t;
                        }
                    }
                    out[bc * lout + j] = row[best];
                    argmax[bc * lout + j] = (bc * l + best) as u32;
                }
            }
        }
        let p = self.clone();
        Tensor::from_op(out, vec![b, c, lout], vec![self.clone()], move |g| {
            p.accum_grad(|gp| {
                for (i, &src) in argmax.iter().enumerate() {
                    gp[src as usize] += g[i];
                }
            });
        })
    }
}

/// Batch normalization over the channel axis of `[B, C, L]`.
///
/// Train mode normalizes with batch statistics (biased variance) and
/// updates the running buffers in place (unbiased variance, standard
/// momentum convention). Eval mode normalizes with the running buffers.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm1d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Rc<RefCell<Vec<f32>>>,
    running_var: &Rc<RefCell<Vec<f32>>>,
    momentum: f32,
    eps: f32,
    train: bool,
) -> Tensor {
    let sx = x.shape();
    assert_eq!(sx.len(), 3, "batchnorm1d expects 3-D input, got {sx:?}");
    let (b, c, l) = (sx[0], sx[1], sx[2]);
    assert_eq!(gamma.shape(), &[c], "batchnorm gamma shape {:?} expected [{c}]", gamma.shape());
    assert_eq!(beta.shape(), &[c], "batchnorm beta shape {:?} expected [{c}]", beta.shape());
    let n = b * l;

    let (mean, var) = if train {
        let xv = x.with_data(|d| d.to_vec());
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ci in 0..c {
            let mut s = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ci) * l;
                for t in 0..l {
                    s += xv[base + t] as f64;
                }
            }
            mean[ci] = (s / n as f64) as f32;
            let mut sq = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ci) * l;
                for t in 0..l {
                    let d = xv[base + t] - mean[ci];
                    sq += (d * d) as f64;
                }
            }
            var[ci] = (sq / n as f64) as f32;
        }
        {
            let mut rm = running_mean.borrow_mut();
            let mut rv = running_var.borrow_mut();
            let unbias = if n > 1 { n as f32 / (n as f32 - 1.0) } else { 1.0 };
            for ci in 0..c {
                rm[ci] = (1.0 - momentum) * rm[ci] + momentum * mean[ci];
                rv[ci] = (1.0 - momentum) * rv[ci] + momentum * var[ci] * unbias;
            }
        }
        (mean, var)
    } else {
        (running_mean.borrow().clone(), running_var.borrow().clone())
    };

    let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0f32; b * c * l];
    let mut out = vec![0.0f32; b * c * l];
    {
        let xv = x.inner.data.borrow();
        let gv = gamma.inner.data.borrow();
        let bv = beta.inner.data.borrow();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * l;
                for t in 0..l {
                    let h = (xv[base + t] - mean[ci]) * invstd[ci];
                    xhat[base + t] = h;
                    out[base + t] = gv[ci] * h + bv[ci];
                }
            }
        }
    }

    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    let g_buf = gamma.buffer();
    let xhat = Rc::new(xhat);
    Tensor::from_op(
        out,
        sx.to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            pg.accum_grad(|gg| {
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * l;
                        let mut acc = 0.0;
                        for t in 0..l {
                            acc += g[base + t] * xhat[base + t];
                        }
                        gg[ci] += acc;
                    }
                }
            });
            pb.accum_grad(|gb| {
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * l;
                        gb[ci] += g[base..base + l].iter().sum::<f32>();
                    }
                }
            });
            if px.requires_grad() {
                let gv = g_buf.borrow();
                if train {
                    // dxhat = g * gamma;
                    // dx = invstd/n * (n*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                    px.accum_grad(|gx| {
                        for ci in 0..c {
                            let mut s1 = 0.0f64;
                            let mut s2 = 0.0f64;
                            for bi in 0..b {
                                let base = (bi * c + ci) * l;
                                for t in 0..l {
                                    let dh = (g[base + t] * gv[ci]) as f64;
                                    s1 += dh;
                                    s2 += dh * xhat[base + t] as f64;
                                }
                            }
                            let (s1, s2) = (s1 as f32, s2 as f32);
                            let scale = invstd[ci] / n as f32;
                            for bi in 0..b {
                                let base = (bi * c + ci) * l;
                                for t in 0..l {
                                    let dh = g[base + t] * gv[ci];
                                    gx[base + t] +=
                                        scale * (n as f32 * dh - s1 - xhat[base + t] * s2);
                                }
                            }
                        }
                    });
                } else {
                    // running stats are constants: plain per-channel affine
                    px.accum_grad(|gx| {
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * l;
                                for t in 0..l {
                                    gx[base + t] += g[base + t] * gv[ci] * invstd[ci];
                                }
                            }
                        }
                    });
                }
            }
        },
    )
}
