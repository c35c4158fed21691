//! Adam with bias correction. Parameter groups are named so that a
//! non-finite gradient can be reported against the group that produced it;
//! a failed step leaves every parameter untouched.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter group '{group}'")]
    NonFiniteGrad { group: String },
    #[error("non-finite value entered parameter buffer '{group}'")]
    NonFiniteParam { group: String },
}

/// Hyperparameters; betas fixed to the standard (0.9, 0.999) by default.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    name: String,
    param: Tensor,
    m: Vec<f32>,
    v: Vec<f32>,
}

pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    slots: Vec<Slot>,
}

impl Adam {
    /// Build from `(group_name, parameter)` pairs; state starts at zero.
    pub fn new(cfg: AdamConfig, params: Vec<(String, Tensor)>) -> Self {
        let slots = params
            .into_iter()
            .map(|(name, param)| {
                let n = param.numel();
                Slot {
                    name,
                    param,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Adam { cfg, t: 0, slots }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all slots. Gradients are consumed (cleared) on
    /// success; a missing gradient counts as zero.
    pub fn step(&mut self) -> Result<(), OptimError> {
        // validate every gradient before touching any parameter
        for slot in &self.slots {
            if let Some(g) = slot.param.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(OptimError::NonFiniteGrad {
                        group: slot.name.clone(),
                    });
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for slot in &mut self.slots {
            let grad = slot.param.take_grad();
            let g_zero;
            let g: &[f32] = match &grad {
                Some(g) => g,
                None => {
                    g_zero = vec![0.0; slot.param.numel()];
                    &g_zero
                }
            };
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            let (lr, eps) = (self.cfg.lr, self.cfg.eps);
            let (m, v) = (&mut slot.m, &mut slot.v);
            slot.param.update_data(|p| {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
            if !slot.param.has_finite_values() {
                return Err(OptimError::NonFiniteParam {
                    group: slot.name.clone(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr() {
        let p = Tensor::param(vec![1.0], &[1]);
        p.accum_grad(|g| g[0] += 1.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), vec![("w".into(), p.clone())]);
        opt.step().unwrap();
        let v = p.to_vec()[0];
        assert!((v - 0.9).abs() < 1e-6, "expected ~0.9, got {v}");
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let p = Tensor::param(vec![0.5, -0.25], &[2]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), vec![("w".into(), p.clone())]);
        opt.step().unwrap();
        assert_eq!(p.to_vec(), vec![0.5, -0.25]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn non_finite_grad_names_group_and_aborts() {
        let a = Tensor::param(vec![1.0], &[1]);
        let b = Tensor::param(vec![2.0], &[1]);
        b.accum_grad(|g| g[0] = f32::NAN);
        let mut opt = Adam::new(
            AdamConfig::with_lr(0.1),
            vec![("encoder".into(), a.clone()), ("heads".into(), b.clone())],
        );
        let err = opt.step().unwrap_err();
        assert!(err.to_string().contains("heads"), "got: {err}");
        // aborted before mutating anything
        assert_eq!(a.to_vec(), vec![1.0]);
        assert_eq!(b.to_vec(), vec![2.0]);
    }

    #[test]
    fn three_step_trajectory_matches_reference_trace() {
        // gradient of 0.5*p^2 is p; reference trace computed in f64
        let mut p_ref = 1.0f64;
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=3 {
            let g = p_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            p_ref -= lr * mhat / (vhat.sqrt() + eps);
            trace.push(p_ref);
        }

        let p = Tensor::param(vec![1.0], &[1]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), vec![("w".into(), p.clone())]);
        for expected in trace {
            let g = p.to_vec()[0];
            p.accum_grad(|gr| gr[0] += g);
            opt.step().unwrap();
            let got = p.to_vec()[0] as f64;
            assert!(
                (got - expected).abs() < 1e-6,
                "trajectory diverged: got {got}, reference {expected}"
            );
        }
    }
}
