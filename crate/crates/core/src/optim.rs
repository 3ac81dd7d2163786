//! SGD with momentum and Adam over lists of parameter slices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerConfig {
    SgdMomentum {
        lr: f32,
        momentum: f32,
    },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        epsilon: f32,
    },
}

impl OptimizerConfig {
    pub const fn sgd(lr: f32, momentum: f32) -> Self {
        Self::SgdMomentum { lr, momentum }
    }

    /// Adam with `(0.9, 0.999)` betas and epsilon `1e-8`.
    pub const fn adam(lr: f32) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn lr(&self) -> f32 {
        match *self {
            Self::SgdMomentum { lr, .. } | Self::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::SgdMomentum { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            Self::Adam {
                lr,
                beta1,
                beta2,
                epsilon,
            } => {
                lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && epsilon > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "bad optimizer settings {:?}",
                self
            )))
        }
    }
}

fn check_lengths(param: &[f32], grad: &[f32], state: &[f32]) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.len() {
        return Err(shape_err(
            "optimizer step",
            format!(
                "param {}, grad {}, state {}",
                param.len(),
                grad.len(),
                state.len()
            ),
        ));
    }
    Ok(())
}

/// `v <- momentum * v + g; w <- w - lr * v`.
pub fn sgd_momentum_step(
    param: &mut [f32],
    grad: &[f32],
    velocity: &mut [f32],
    lr: f32,
    momentum: f32,
) -> Result<()> {
    check_lengths(param, grad, velocity)?;
    for ((w, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

/// Bias-corrected Adam update at step `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    epsilon: f32,
) -> Result<()> {
    check_lengths(param, grad, m)?;
    check_lengths(param, grad, v)?;
    if t == 0 {
        return Err(Error::InvalidConfig("Adam step counter starts at 1".into()));
    }
    let c1 = 1.0 - (beta1 as f64).powi(t as i32);
    let c2 = 1.0 - (beta2 as f64).powi(t as i32);
    let (c1, c2) = (c1 as f32, c2 as f32);
    for (((w, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Slot {
    /// Velocity (SGD) or first moment (Adam).
    pub first: Vec<f32>,
    /// Second moment (Adam only).
    pub second: Vec<f32>,
}

/// Optimizer with one state slot per parameter tensor. Slots are created on
/// the first step and must keep the same shapes afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub t: u64,
    pub slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            slots: Vec::new(),
        })
    }

    pub fn reset(&mut self) {
        self.t = 0;
        self.slots.clear();
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: &[Vec<f32>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err(
                "optimizer step",
                format!(
                    "{} parameter tensors, {} gradients",
                    params.len(),
                    grads.len()
                ),
            ));
        }
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    first: vec![0.0; p.len()],
                    second: match self.config {
                        OptimizerConfig::Adam { .. } => vec![0.0; p.len()],
                        OptimizerConfig::SgdMomentum { .. } => Vec::new(),
                    },
                })
                .collect();
        } else if self.slots.len() != params.len() {
            return Err(shape_err(
                "optimizer step",
                format!(
                    "{} state slots, {} parameter tensors",
                    self.slots.len(),
                    params.len()
                ),
            ));
        }
        self.t += 1;
        let mut finite = true;
        for ((p, g), slot) in params.into_iter().zip(grads).zip(&mut self.slots) {
            match self.config {
                OptimizerConfig::SgdMomentum { lr, momentum } => {
                    sgd_momentum_step(p, g, &mut slot.first, lr, momentum)?
                }
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    epsilon,
                } => adam_step(
                    p,
                    g,
                    &mut slot.first,
                    &mut slot.second,
                    self.t,
                    lr,
                    beta1,
                    beta2,
                    epsilon,
                )?,
            }
            finite &= p.iter().all(|v| v.is_finite());
        }
        // the parameters are already written; callers that want to recover
        // keep their own snapshot
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite("optimizer step"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_when_momentum_is_zero() {
        let mut w = [1.0f32, -2.0];
        let mut v = [0.0f32; 2];
        sgd_momentum_step(&mut w, &[0.5, 1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(w, [1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn velocity_closed_form_after_two_steps() {
        let mut w = [0.0f32];
        let mut v = [0.0f32];
        sgd_momentum_step(&mut w, &[1.5], &mut v, 0.1, 0.9).unwrap();
        sgd_momentum_step(&mut w, &[-0.5], &mut v, 0.1, 0.9).unwrap();
        assert!((v[0] - (0.9 * 1.5 - 0.5)).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_no_change() {
        let mut w = [0.3f32, 0.7];
        let (mut v, mut m, mut s) = ([0.0f32; 2], [0.0f32; 2], [0.0f32; 2]);
        sgd_momentum_step(&mut w, &[0.0; 2], &mut v, 0.1, 0.9).unwrap();
        adam_step(&mut w, &[0.0; 2], &mut m, &mut s, 1, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(w, [0.3, 0.7]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // t = 1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
        for g in [1e-3f32, 0.5, -2.0, 40.0] {
            let mut w = [0.0f32];
            let (mut m, mut v) = ([0.0f32], [0.0f32]);
            adam_step(&mut w, &[g], &mut m, &mut v, 1, 1e-3, 0.9, 0.999, 1e-8).unwrap();
            let expect = -1e-3 * g / (g.abs() + 1e-8);
            assert!((w[0] - expect).abs() < 1e-9, "g {g}: {} vs {expect}", w[0]);
            assert!((w[0].abs() - 1e-3).abs() < 1e-5 * (1.0 + 1.0 / g.abs()));
        }
    }

    #[test]
    fn adam_defaults() {
        assert_eq!(
            OptimizerConfig::adam(1e-3),
            OptimizerConfig::Adam {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8
            }
        );
    }

    #[test]
    fn shape_mismatch_and_bad_config() {
        let mut w = [0.0f32; 2];
        let mut v = [0.0f32; 3];
        assert!(sgd_momentum_step(&mut w, &[0.0; 2], &mut v, 0.1, 0.9).is_err());
        assert!(Optimizer::new(OptimizerConfig::sgd(0.0, 0.9)).is_err());
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.9)).unwrap();
        assert!(opt
            .step(vec![&mut w[..]], &[vec![0.0; 2], vec![0.0]])
            .is_err());
    }
}
