//! Elementwise, activation, reduction, and shape primitives.

use super::{Tensor, EPS_NORM};

fn assert_same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op} shape mismatch: lhs {:?} rhs {:?}",
        a.shape(),
        b.shape()
    );
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_same_shape("add", self, other);
        let out: Vec<f32> = {
            let a = self.inner.data.borrow();
            let b = other.inner.data.borrow();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone(), other.clone()], move |g| {
            pa.accum_grad(|ga| ga.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            pb.accum_grad(|gb| gb.iter_mut().zip(g).for_each(|(d, v)| *d += v));
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_same_shape("sub", self, other);
        let out: Vec<f32> = {
            let a = self.inner.data.borrow();
            let b = other.inner.data.borrow();
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone(), other.clone()], move |g| {
            pa.accum_grad(|ga| ga.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            pb.accum_grad(|gb| gb.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_same_shape("mul", self, other);
        let out: Vec<f32> = {
            let a = self.inner.data.borrow();
            let b = other.inner.data.borrow();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        let (da, db) = (self.buffer(), other.buffer());
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone(), other.clone()], move |g| {
            {
                let b = db.borrow();
                pa.accum_grad(|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * b[i];
                    }
                });
            }
            let a = da.borrow();
            pb.accum_grad(|gb| {
                for i in 0..g.len() {
                    gb[i] += g[i] * a[i];
                }
            });
        })
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let out: Vec<f32> = self.inner.data.borrow().iter().map(|x| x + c).collect();
        let p = self.clone();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            p.accum_grad(|gp| gp.iter_mut().zip(g).for_each(|(d, v)| *d += v));
        })
    }

    pub fn mul_scalar(&self, c: f32) -> Tensor {
        let out: Vec<f32> = self.inner.data.borrow().iter().map(|x| x * c).collect();
        let p = self.clone();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            p.accum_grad(|gp| gp.iter_mut().zip(g).for_each(|(d, v)| *d += v * c));
        })
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f32> = self.inner.data.borrow().iter().map(|x| x.max(0.0)).collect();
        let p = self.clone();
        let x = self.buffer();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            let x = x.borrow();
            p.accum_grad(|gp| {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        gp[i] += g[i];
                    }
                }
            });
        })
    }

    /// PReLU with a single learnable slope: `y = x` for `x > 0`, `s * x` otherwise.
    pub fn prelu(&self, slope: &Tensor) -> Tensor {
        assert_eq!(slope.numel(), 1, "prelu slope must be a scalar tensor, got shape {:?}", slope.shape());
        let s = slope.item();
        let out: Vec<f32> = self
            .inner
            .data
            .borrow()
            .iter()
            .map(|&x| if x > 0.0 { x } else { s * x })
            .collect();
        let p = self.clone();
        let ps = slope.clone();
        let x = self.buffer();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), slope.clone()],
            move |g| {
                let x = x.borrow();
                p.accum_grad(|gp| {
                    for i in 0..g.len() {
                        gp[i] += g[i] * if x[i] > 0.0 { 1.0 } else { s };
                    }
                });
                ps.accum_grad(|gs| {
                    let mut acc = 0.0;
                    for i in 0..g.len() {
                        if x[i] <= 0.0 {
                            acc += g[i] * x[i];
                        }
                    }
                    gs[0] += acc;
                });
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f32> = self
            .inner
            .data
            .borrow()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let p = self.clone();
        let y = out.clone();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            p.accum_grad(|gp| {
                for i in 0..g.len() {
                    gp[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        })
    }

    pub fn tanh(&self) -> Tensor {
        let y: Vec<f32> = self.inner.data.borrow().iter().map(|x| x.tanh()).collect();
        let p = self.clone();
        let saved = y.clone();
        Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], move |g| {
            p.accum_grad(|gp| {
                for i in 0..g.len() {
                    gp[i] += g[i] * (1.0 - saved[i] * saved[i]);
                }
            });
        })
    }

    /// Natural log. Callers guard the domain (losses add `EPS_LOG` first).
    pub fn log(&self) -> Tensor {
        let out: Vec<f32> = self.inner.data.borrow().iter().map(|x| x.ln()).collect();
        let p = self.clone();
        let x = self.buffer();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            let x = x.borrow();
            p.accum_grad(|gp| {
                for i in 0..g.len() {
                    gp[i] += g[i] / x[i];
                }
            });
        })
    }

    /// Row-wise max-subtracted softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "softmax_rows expects 2-D input, got {:?}", self.shape());
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0f32; rows * cols];
        {
            let x = self.inner.data.borrow();
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for c in 0..cols {
                    let e = (row[c] - m).exp();
                    out[r * cols + c] = e;
                    sum += e;
                }
                for c in 0..cols {
                    out[r * cols + c] /= sum;
                }
            }
        }
        let p = self.clone();
        let y = out.clone();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            p.accum_grad(|gp| {
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += g[base + c] * y[base + c];
                    }
                    for c in 0..cols {
                        gp[base + c] += y[base + c] * (g[base + c] - dot);
                    }
                }
            });
        })
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f32 = self.inner.data.borrow().iter().sum();
        let p = self.clone();
        Tensor::from_op(vec![total], vec![1], vec![self.clone()], move |g| {
            let s = g[0];
            p.accum_grad(|gp| gp.iter_mut().for_each(|d| *d += s));
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f32;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Column means of a 2-D tensor: `[R, C] -> [C]`.
    pub fn mean_axis0(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "mean_axis0 expects 2-D input, got {:?}", self.shape());
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0f32; cols];
        {
            let x = self.inner.data.borrow();
            for r in 0..rows {
                for c in 0..cols {
                    out[c] += x[r * cols + c];
                }
            }
        }
        let inv = 1.0 / rows as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let p = self.clone();
        Tensor::from_op(out, vec![cols], vec![self.clone()], move |g| {
            p.accum_grad(|gp| {
                for r in 0..rows {
                    for c in 0..cols {
                        gp[r * cols + c] += g[c] * inv;
                    }
                }
            });
        })
    }

    /// Sum over the last axis: `[.., M] -> [..]`.
    pub fn sum_last(&self) -> Tensor {
        let nd = self.shape().len();
        assert!(nd >= 2, "sum_last expects rank >= 2, got {:?}", self.shape());
        let m = self.shape()[nd - 1];
        let lead: usize = self.shape()[..nd - 1].iter().product();
        let mut out = vec![0.0f32; lead];
        {
            let x = self.inner.data.borrow();
            for i in 0..lead {
                out[i] = x[i * m..(i + 1) * m].iter().sum();
            }
        }
        let p = self.clone();
        let out_shape = self.shape()[..nd - 1].to_vec();
        Tensor::from_op(out, out_shape, vec![self.clone()], move |g| {
            p.accum_grad(|gp| {
                for i in 0..lead {
                    for j in 0..m {
                        gp[i * m + j] += g[i];
                    }
                }
            });
        })
    }

    /// Mean over the last axis: `[.., M] -> [..]`.
    pub fn mean_last(&self) -> Tensor {
        let m = *self.shape().last().expect("mean_last on empty shape") as f32;
        self.sum_last().mul_scalar(1.0 / m)
    }

    /// Each last-axis vector divided by `max(l2_norm, EPS_NORM)`.
    pub fn l2_normalize_rows(&self) -> Tensor {
        let nd = self.shape().len();
        assert!(nd >= 2, "l2_normalize_rows expects rank >= 2, got {:?}", self.shape());
        let m = self.shape()[nd - 1];
        let lead: usize = self.shape()[..nd - 1].iter().product();
        let mut out = vec![0.0f32; lead * m];
        let mut denoms = vec![0.0f32; lead];
        {
            let x = self.inner.data.borrow();
            for i in 0..lead {
                let row = &x[i * m..(i + 1) * m];
                let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                let d = norm.max(EPS_NORM);
                denoms[i] = d;
                for j in 0..m {
                    out[i * m + j] = row[j] / d;
                }
            }
        }
        let p = self.clone();
        let y = out.clone();
        let x_buf = self.buffer();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            let x = x_buf.borrow();
            p.accum_grad(|gp| {
                for i in 0..lead {
                    let base = i * m;
                    let d = denoms[i];
                    // rows clamped to EPS_NORM are a constant scale
                    let raw_norm = x[base..base + m].iter().map(|v| v * v).sum::<f32>().sqrt();
                    if raw_norm > EPS_NORM {
                        let mut dot = 0.0;
                        for j in 0..m {
                            dot += g[base + j] * y[base + j];
                        }
                        for j in 0..m {
                            gp[base + j] += (g[base + j] - y[base + j] * dot) / d;
                        }
                    } else {
                        for j in 0..m {
                            gp[base + j] += g[base + j] / d;
                        }
                    }
                }
            });
        })
    }

    /// `x^(-1/2)` where `x > EPS_NORM`, else `0`. Used for degree
    /// normalization so isolated nodes get coefficient zero instead of inf.
    pub fn rsqrt_or_zero(&self) -> Tensor {
        let out: Vec<f32> = self
            .inner
            .data
            .borrow()
            .iter()
            .map(|&x| if x > EPS_NORM { 1.0 / x.sqrt() } else { 0.0 })
            .collect();
        let p = self.clone();
        let x_buf = self.buffer();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            let x = x_buf.borrow();
            p.accum_grad(|gp| {
                for i in 0..g.len() {
                    if x[i] > EPS_NORM {
                        gp[i] += g[i] * (-0.5) * x[i].powf(-1.5);
                    }
                }
            });
        })
    }

    /// Multiply a `[B, N, M]` tensor along axis 1: `out[b,i,j] = a[b,i,j] * s[b,i]`.
    pub fn scale_dim1(&self, s: &Tensor) -> Tensor {
        let sh = self.shape();
        assert_eq!(sh.len(), 3, "scale_dim1 expects 3-D input, got {:?}", sh);
        assert_eq!(
            s.shape(),
            &sh[..2],
            "scale_dim1 scale shape {:?} does not match leading dims of {:?}",
            s.shape(),
            sh
        );
        let (b, n, m) = (sh[0], sh[1], sh[2]);
        let mut out = vec![0.0f32; b * n * m];
        {
            let a = self.inner.data.borrow();
            let sv = s.inner.data.borrow();
            for bi in 0..b * n {
                let f = sv[bi];
                for j in 0..m {
                    out[bi * m + j] = a[bi * m + j] * f;
                }
            }
        }
        let (pa, ps) = (self.clone(), s.clone());
        let (a_buf, s_buf) = (self.buffer(), s.buffer());
        Tensor::from_op(out, sh.to_vec(), vec![self.clone(), s.clone()], move |g| {
            {
                let sv = s_buf.borrow();
                pa.accum_grad(|ga| {
                    for bi in 0..b * n {
                        let f = sv[bi];
                        for j in 0..m {
                            ga[bi * m + j] += g[bi * m + j] * f;
                        }
                    }
                });
            }
            let a = a_buf.borrow();
            ps.accum_grad(|gs| {
                for bi in 0..b * n {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += g[bi * m + j] * a[bi * m + j];
                    }
                    gs[bi] += acc;
                }
            });
        })
    }

    /// Multiply a `[B, N, M]` tensor along axis 2: `out[b,i,j] = a[b,i,j] * s[b,j]`.
    pub fn scale_dim2(&self, s: &Tensor) -> Tensor {
        let sh = self.shape();
        assert_eq!(sh.len(), 3, "scale_dim2 expects 3-D input, got {:?}", sh);
        let (b, n, m) = (sh[0], sh[1], sh[2]);
        assert_eq!(
            s.shape(),
            &[b, m],
            "scale_dim2 scale shape {:?} does not match dims [B, M] of {:?}",
            s.shape(),
            sh
        );
        let mut out = vec![0.0f32; b * n * m];
        {
            let a = self.inner.data.borrow();
            let sv = s.inner.data.borrow();
            for bi in 0..b {
                for i in 0..n {
                    let row = (bi * n + i) * m;
                    for j in 0..m {
                        out[row + j] = a[row + j] * sv[bi * m + j];
                    }
                }
            }
        }
        let (pa, ps) = (self.clone(), s.clone());
        let (a_buf, s_buf) = (self.buffer(), s.buffer());
        Tensor::from_op(out, sh.to_vec(), vec![self.clone(), s.clone()], move |g| {
            {
                let sv = s_buf.borrow();
                pa.accum_grad(|ga| {
                    for bi in 0..b {
                        for i in 0..n {
                            let row = (bi * n + i) * m;
                            for j in 0..m {
                                ga[row + j] += g[row + j] * sv[bi * m + j];
                            }
                        }
                    }
                });
            }
            let a = a_buf.borrow();
            ps.accum_grad(|gs| {
                for bi in 0..b {
                    for i in 0..n {
                        let row = (bi * n + i) * m;
                        for j in 0..m {
                            gs[bi * m + j] += g[row + j] * a[row + j];
                        }
                    }
                }
            });
        })
    }

    /// Broadcast-add a `[C]` bias over the last axis.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let nd = self.shape().len();
        let c = self.shape()[nd - 1];
        assert_eq!(
            bias.shape(),
            &[c],
            "add_bias shape mismatch: input {:?} bias {:?}",
            self.shape(),
            bias.shape()
        );
        let lead = self.numel() / c;
        let mut out = self.to_vec();
        {
            let b = bias.inner.data.borrow();
            for i in 0..lead {
                for j in 0..c {
                    out[i * c + j] += b[j];
                }
            }
        }
        let (pa, pb) = (self.clone(), bias.clone());
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone(), bias.clone()], move |g| {
            pa.accum_grad(|ga| ga.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            pb.accum_grad(|gb| {
                for i in 0..lead {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
            });
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape target {:?} incompatible with source shape {:?}",
            shape,
            self.shape()
        );
        let p = self.clone();
        Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], move |g| {
            p.accum_grad(|gp| gp.iter_mut().zip(g).for_each(|(d, v)| *d += v));
        })
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Tensor {
        let nd = self.shape().len();
        assert!(nd >= 2, "transpose_last2 expects rank >= 2, got {:?}", self.shape());
        let (m, n) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        let lead: usize = self.shape()[..nd - 2].iter().product();
        let mut out = vec![0.0f32; self.numel()];
        {
            let x = self.inner.data.borrow();
            for l in 0..lead {
                let base = l * m * n;
                for i in 0..m {
                    for j in 0..n {
                        out[base + j * m + i] = x[base + i * n + j];
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.swap(nd - 2, nd - 1);
        let p = self.clone();
        Tensor::from_op(out, shape, vec![self.clone()], move |g| {
            p.accum_grad(|gp| {
                for l in 0..lead {
                    let base = l * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            gp[base + i * n + j] += g[base + j * m + i];
                        }
                    }
                }
            });
        })
    }

    /// Select index `t` along axis 1 of a 3-D tensor: `[B, N, D] -> [B, D]`.
    pub fn index_axis1(&self, t: usize) -> Tensor {
        let sh = self.shape();
        assert_eq!(sh.len(), 3, "index_axis1 expects 3-D input, got {:?}", sh);
        let (b, n, d) = (sh[0], sh[1], sh[2]);
        assert!(t < n, "index {t} out of bounds for axis of extent {n}");
        let mut out = vec![0.0f32; b * d];
        {
            let x = self.inner.data.borrow();
            for bi in 0..b {
                let src = (bi * n + t) * d;
                out[bi * d..(bi + 1) * d].copy_from_slice(&x[src..src + d]);
            }
        }
        let p = self.clone();
        Tensor::from_op(out, vec![b, d], vec![self.clone()], move |g| {
            p.accum_grad(|gp| {
                for bi in 0..b {
                    let dst = (bi * n + t) * d;
                    for j in 0..d {
                        gp[dst + j] += g[bi * d + j];
                    }
                }
            });
        })
    }
}

/// Concatenate tensors along `axis`. All other extents must agree.
pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let nd = parts[0].shape().len();
    assert!(axis < nd, "concat axis {axis} out of range for rank {nd}");
    for p in parts {
        assert_eq!(p.shape().len(), nd, "concat rank mismatch: {:?} vs {:?}", parts[0].shape(), p.shape());
        for (d, (a, b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
            assert!(
                d == axis || a == b,
                "concat shape mismatch on axis {d}: {:?} vs {:?}",
                parts[0].shape(),
                p.shape()
            );
        }
    }
    let outer: usize = parts[0].shape()[..axis].iter().product();
    let inner: usize = parts[0].shape()[axis + 1..].iter().product();
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = lens.iter().sum();

    let mut shape = parts[0].shape().to_vec();
    shape[axis] = total;
    let mut out = vec![0.0f32; outer * total * inner];
    for o in 0..outer {
        let mut off = 0usize;
        for (p, &len) in parts.iter().zip(&lens) {
            let data = p.inner.data.borrow();
            let src = o * len * inner;
            let dst = (o * total + off) * inner;
            out[dst..dst + len * inner].copy_from_slice(&data[src..src + len * inner]);
            off += len;
        }
    }

    let owned: Vec<Tensor> = parts.to_vec();
    let lens_bw = lens.clone();
    Tensor::from_op(out, shape, owned.clone(), move |g| {
        for o in 0..outer {
            let mut off = 0usize;
            for (p, &len) in owned.iter().zip(&lens_bw) {
                let src = (o * total + off) * inner;
                p.accum_grad(|gp| {
                    let dst = o * len * inner;
                    for i in 0..len * inner {
                        gp[dst + i] += g[src + i];
                    }
                });
                off += len;
            }
        }
    })
}
