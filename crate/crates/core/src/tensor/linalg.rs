//! Matrix products. The inner kernel is `matrixmultiply::sgemm`
//! (single-threaded, deterministic); forward and backward of `matmul`,
//! `bmm`, and `bmm_nt` are all expressed through it with stride tricks
//! instead of materialized transposes.

use super::Tensor;

/// Safe wrapper over `sgemm`: `c = alpha * a(op) * b(op) + beta * c`,
/// with `ta`/`tb` selecting logical transposition via strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k, "gemm lhs buffer too small: {} < {}", a.len(), m * k);
    assert!(b.len() >= k * n, "gemm rhs buffer too small: {} < {}", b.len(), k * n);
    assert!(c.len() >= m * n, "gemm out buffer too small: {} < {}", c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// 2-D matrix product `[M, K] x [K, P] -> [M, P]`.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), rhs.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul dimension mismatch: lhs {sa:?} rhs {sb:?}"
        );
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * p];
        {
            let a = self.inner.data.borrow();
            let b = rhs.inner.data.borrow();
            gemm(m, k, p, 1.0, &a, false, &b, false, 0.0, &mut out);
        }
        let (pa, pb) = (self.clone(), rhs.clone());
        let (a_buf, b_buf) = (self.buffer(), rhs.buffer());
        Tensor::from_op(out, vec![m, p], vec![self.clone(), rhs.clone()], move |g| {
            {
                // dA = dC * B^T
                let b = b_buf.borrow();
                pa.accum_grad(|ga| gemm(m, p, k, 1.0, g, false, &b, true, 1.0, ga));
            }
            // dB = A^T * dC
            let a = a_buf.borrow();
            pb.accum_grad(|gb| gemm(k, m, p, 1.0, &a, true, g, false, 1.0, gb));
        })
    }

    /// Batched product `[B, M, K] x [B, K, P] -> [B, M, P]`.
    pub fn bmm(&self, rhs: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), rhs.shape());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "bmm dimension mismatch: lhs {sa:?} rhs {sb:?}"
        );
        let (bs, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0f32; bs * m * p];
        {
            let a = self.inner.data.borrow();
            let b = rhs.inner.data.borrow();
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    p,
                    1.0,
                    &a[i * m * k..(i + 1) * m * k],
                    false,
                    &b[i * k * p..(i + 1) * k * p],
                    false,
                    0.0,
                    &mut out[i * m * p..(i + 1) * m * p],
                );
            }
        }
        let (pa, pb) = (self.clone(), rhs.clone());
        let (a_buf, b_buf) = (self.buffer(), rhs.buffer());
        Tensor::from_op(out, vec![bs, m, p], vec![self.clone(), rhs.clone()], move |g| {
            {
                let b = b_buf.borrow();
                pa.accum_grad(|ga| {
                    for i in 0..bs {
                        gemm(
                            m,
                            p,
                            k,
                            1.0,
                            &g[i * m * p..(i + 1) * m * p],
                            false,
                            &b[i * k * p..(i + 1) * k * p],
                            true,
                            1.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
            }
            let a = a_buf.borrow();
            pb.accum_grad(|gb| {
                for i in 0..bs {
                    gemm(
                        k,
                        m,
                        p,
                        1.0,
                        &a[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * p..(i + 1) * m * p],
                        false,
                        1.0,
                        &mut gb[i * k * p..(i + 1) * k * p],
                    );
                }
            });
        })
    }

    /// Batched product with transposed rhs: `[B, M, K] x [B, P, K] -> [B, M, P]`.
    /// Used for Gram matrices (`z @ z^T`) without materializing transposes.
    pub fn bmm_nt(&self, rhs: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), rhs.shape());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2],
            "bmm_nt dimension mismatch: lhs {sa:?} rhs {sb:?}"
        );
        let (bs, m, k, p) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0f32; bs * m * p];
        {
            let a = self.inner.data.borrow();
            let b = rhs.inner.data.borrow();
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    p,
                    1.0,
                    &a[i * m * k..(i + 1) * m * k],
                    false,
                    &b[i * p * k..(i + 1) * p * k],
                    true,
                    0.0,
                    &mut out[i * m * p..(i + 1) * m * p],
                );
            }
        }
        let (pa, pb) = (self.clone(), rhs.clone());
        let (a_buf, b_buf) = (self.buffer(), rhs.buffer());
        Tensor::from_op(out, vec![bs, m, p], vec![self.clone(), rhs.clone()], move |g| {
            {
                // dA = dC * B
                let b = b_buf.borrow();
                pa.accum_grad(|ga| {
                    for i in 0..bs {
                        gemm(
                            m,
                            p,
                            k,
                            1.0,
                            &g[i * m * p..(i + 1) * m * p],
                            false,
                            &b[i * p * k..(i + 1) * p * k],
                            false,
                            1.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
            }
            // dB = dC^T * A
            let a = a_buf.borrow();
            pb.accum_grad(|gb| {
                for i in 0..bs {
                    gemm(
                        p,
                        m,
                        k,
                        1.0,
                        &g[i * m * p..(i + 1) * m * p],
                        true,
                        &a[i * m * k..(i + 1) * m * k],
                        false,
                        1.0,
                        &mut gb[i * p * k..(i + 1) * p * k],
                    );
                }
            });
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;

    #[test]
    fn identity_matmul() {
        let i = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = Tensor::from_vec(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]);
        assert_eq!(i.matmul(&b).to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]);
        let b = Tensor::from_vec(vec![3.0, 4.0], &[2, 1]);
        assert_eq!(a.matmul(&b).to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_backward_hand_case() {
        let a = Tensor::param(vec![1.0, 2.0], &[1, 2]);
        let b = Tensor::param(vec![3.0, 4.0], &[2, 1]);
        a.matmul(&b).sum_all().backward();
        assert_eq!(a.grad().unwrap(), vec![3.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "matmul dimension mismatch")]
    fn matmul_shape_mismatch_panics() {
        let a = Tensor::from_vec(vec![0.0; 8], &[2, 4]);
        let b = Tensor::from_vec(vec![0.0; 6], &[3, 2]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn bmm_nt_is_gram() {
        // rows [1,0] and [0,1]: gram = identity
        let z = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[1, 2, 2]);
        let g = z.bmm_nt(&z);
        assert_eq!(g.to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn bmm_matches_per_sample_matmul() {
        let a = Tensor::from_vec((0..12).map(|v| v as f32).collect(), &[2, 2, 3]);
        let b = Tensor::from_vec((0..12).map(|v| (v as f32) * 0.5).collect(), &[2, 3, 2]);
        let out = a.bmm(&b);
        for s in 0..2 {
            let a2 = Tensor::from_vec(a.to_vec()[s * 6..(s + 1) * 6].to_vec(), &[2, 3]);
            let b2 = Tensor::from_vec(b.to_vec()[s * 6..(s + 1) * 6].to_vec(), &[3, 2]);
            let expect = a2.matmul(&b2).to_vec();
            assert_eq!(&out.to_vec()[s * 4..(s + 1) * 4], &expect[..]);
        }
    }
}
