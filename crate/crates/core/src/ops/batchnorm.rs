//! Per-channel batch normalization over `(N, H, W)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    /// Weight of the newest batch in the running-statistics update.
    pub momentum: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Per-channel mean and biased variance used for a normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel that produced the statistics.
    pub count: usize,
    pub mode: BnMode,
}

impl<T: Real> BatchNormParams<T> {
    /// `gamma = 1, beta = 0`, running mean 0 and running variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::lit(DEFAULT_EPSILON),
            momentum: T::lit(DEFAULT_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Trainable parameters only (`gamma`, `beta`).
    pub fn param_count(&self) -> usize {
        2 * self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::InvalidConfig(
                "batch-norm vectors differ in length".into(),
            ));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::InvalidConfig(
                "batch-norm epsilon must be positive".into(),
            ));
        }
        if !(self.momentum > T::zero() && self.momentum < T::one()) {
            return Err(Error::InvalidConfig(
                "batch-norm momentum must lie in (0, 1)".into(),
            ));
        }
        if self.running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::NegativeVariance);
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor<T>, op: &'static str) -> Result<()> {
        if input.shape().c != self.channels() {
            return Err(shape_err(
                op,
                format!(
                    "{} input channels, {} batch-norm channels",
                    input.shape().c,
                    self.channels()
                ),
            ));
        }
        Ok(())
    }

    pub fn running_stats(&self) -> BatchStats<T> {
        BatchStats {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
            count: 0,
            mode: BnMode::Eval,
        }
    }

    /// Momentum update of the running statistics; the variance estimate is
    /// unbiased when more than one element contributed.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            T::lit(stats.count as f64) / T::lit((stats.count - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..self.channels() {
            self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] =
                (T::one() - m) * self.running_var[c] + m * stats.var[c] * correction;
        }
    }

    pub fn cast<U: Real>(&self) -> BatchNormParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::lit(x.to_f64())).collect::<Vec<U>>();
        BatchNormParams {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            epsilon: U::lit(self.epsilon.to_f64()),
            momentum: U::lit(self.momentum.to_f64()),
        }
    }
}

/// Mean and biased variance per channel.
pub fn batch_statistics<T: Real>(input: &Tensor<T>) -> Result<BatchStats<T>> {
    let s = input.shape();
    let count = s.n * s.plane();
    if count == 0 {
        return Err(Error::EmptyInput("batch_statistics"));
    }
    let inv = T::one() / T::lit(count as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc = input.plane(n, c).iter().fold(acc, |a, &v| a + v);
        }
        let mu = acc * inv;
        let mut sq = T::zero();
        for n in 0..s.n {
            sq = input
                .plane(n, c)
                .iter()
                .fold(sq, |a, &v| a + (v - mu) * (v - mu));
        }
        mean[c] = mu;
        var[c] = sq * inv;
    }
    Ok(BatchStats {
        mean,
        var,
        count,
        mode: BnMode::Train,
    })
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` with the given statistics.
pub fn batchnorm_normalize<T: Real>(
    input: &Tensor<T>,
    p: &BatchNormParams<T>,
    stats: &BatchStats<T>,
) -> Result<Tensor<T>> {
    p.check_input(input, "batchnorm_forward")?;
    let s = input.shape();
    let mut out = input.clone();
    for c in 0..s.c {
        let denom = stats.var[c] + p.epsilon;
        if !(denom > T::zero()) {
            return Err(Error::NegativeVariance);
        }
        let scale = p.gamma[c] / denom.sqrt();
        let shift = p.beta[c] - stats.mean[c] * scale;
        for n in 0..s.n {
            for v in out.plane_mut(n, c) {
                *v = *v * scale + shift;
            }
        }
    }
    out.ensure_finite("batchnorm_forward")
}

/// Train mode normalizes with batch statistics and folds them into the
/// running statistics; eval mode uses the running statistics unchanged.
pub fn batchnorm_forward<T: Real>(
    input: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    p.check_input(input, "batchnorm_forward")?;
    if p.running_var.iter().any(|&v| v < T::zero()) {
        return Err(Error::NegativeVariance);
    }
    let stats = match mode {
        BnMode::Train => batch_statistics(input)?,
        BnMode::Eval => p.running_stats(),
    };
    let out = batchnorm_normalize(input, p, &stats)?;
    if mode == BnMode::Train {
        p.update_running(&stats);
    }
    Ok((out, stats))
}

#[derive(Clone, Debug)]
pub struct BnGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward pass of [`batchnorm_normalize`]. With train-mode statistics the
/// gradient flows through the batch mean and variance; with eval-mode
/// statistics the layer is a per-channel affine map.
pub fn batchnorm_backward<T: Real>(
    input: &Tensor<T>,
    p: &BatchNormParams<T>,
    stats: &BatchStats<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    p.check_input(input, "batchnorm_backward")?;
    grad_out.expect_shape(input.shape(), "batchnorm_backward")?;
    let s = input.shape();
    let m = T::lit((s.n * s.plane()) as f64);
    let mut grad_in = Tensor::zeros(s);
    let mut grad_gamma = vec![T::zero(); s.c];
    let mut grad_beta = vec![T::zero(); s.c];

    for c in 0..s.c {
        let denom = stats.var[c] + p.epsilon;
        if !(denom > T::zero()) {
            return Err(Error::NegativeVariance);
        }
        let inv_std = T::one() / denom.sqrt();
        let mu = stats.mean[c];
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for n in 0..s.n {
            for (&x, &dy) in input.plane(n, c).iter().zip(grad_out.plane(n, c)) {
                sum_dy = sum_dy + dy;
                sum_dy_xhat = sum_dy_xhat + dy * (x - mu) * inv_std;
            }
        }
        grad_beta[c] = sum_dy;
        grad_gamma[c] = sum_dy_xhat;

        let g = p.gamma[c] * inv_std;
        for n in 0..s.n {
            let dst = grad_in.plane_mut(n, c);
            for ((d, &x), &dy) in dst
                .iter_mut()
                .zip(input.plane(n, c))
                .zip(grad_out.plane(n, c))
            {
                *d = match stats.mode {
                    BnMode::Train => {
                        let xhat = (x - mu) * inv_std;
                        g * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                    }
                    BnMode::Eval => g * dy,
                };
            }
        }
    }

    if !grad_gamma.iter().chain(&grad_beta).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("batchnorm_backward"));
    }
    Ok(BnGrads {
        input: grad_in.ensure_finite("batchnorm_backward")?,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn ramp(shape: Shape4) -> Tensor<f64> {
        Tensor::from_fn(shape, |n, c, h, w| {
            ((n * 7 + c * 3 + h * 5 + w) % 11) as f64 * 0.37 - 1.2
        })
    }

    #[test]
    fn train_mode_standardizes() {
        let x = ramp(Shape4::new(3, 2, 4, 4));
        let mut p = BatchNormParams::<f64>::identity(2);
        let (y, _) = batchnorm_forward(&x, &mut p, BnMode::Train).unwrap();
        let st = batch_statistics(&y).unwrap();
        for c in 0..2 {
            assert!(st.mean[c].abs() < 1e-12);
            assert!((st.var[c] - 1.0).abs() < 1e-3, "var {}", st.var[c]);
        }
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::<f64>::full(Shape4::new(2, 2, 3, 3), 4.0);
        let mut p = BatchNormParams::<f64>::identity(2);
        p.beta = vec![0.25, -3.0];
        let (y, _) = batchnorm_forward(&x, &mut p, BnMode::Train).unwrap();
        assert!(y.plane(1, 0).iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert!(y.plane(0, 1).iter().all(|v| (v + 3.0).abs() < 1e-12));
    }

    #[test]
    fn eval_with_batch_stats_reproduces_train_output() {
        let x = ramp(Shape4::new(2, 3, 5, 5)).cast::<f32>();
        let mut p = BatchNormParams::<f32>::identity(3);
        p.gamma = vec![1.5, -0.5, 2.0];
        p.beta = vec![0.1, 0.2, -0.3];
        let (train_out, stats) = batchnorm_forward(&x, &mut p, BnMode::Train).unwrap();
        p.running_mean = stats.mean.clone();
        p.running_var = stats.var.clone();
        let (eval_out, _) = batchnorm_forward(&x, &mut p, BnMode::Eval).unwrap();
        assert!(train_out.max_abs_diff(&eval_out).unwrap() < 1e-5);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::from_fn(Shape4::new(1, 1, 1, 2), |_, _, _, w| w as f64 * 2.0);
        let mut p = BatchNormParams::<f64>::identity(1);
        batchnorm_forward(&x, &mut p, BnMode::Train).unwrap();
        // mean 1, biased var 1, unbiased 2
        assert!((p.running_mean[0] - 0.1).abs() < 1e-12);
        assert!((p.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn grad_beta_is_channel_sum_and_zero_gamma_blocks_input() {
        let x = ramp(Shape4::new(2, 2, 3, 3));
        let mut p = BatchNormParams::<f64>::identity(2);
        p.gamma = vec![0.0, 0.0];
        let stats = batch_statistics(&x).unwrap();
        let go = Tensor::from_fn(x.shape(), |n, c, h, w| {
            (n + 2 * c + h) as f64 - w as f64 * 0.5
        });
        let g = batchnorm_backward(&x, &p, &stats, &go).unwrap();
        for c in 0..2 {
            let expect: f64 = (0..2).map(|n| go.plane(n, c).iter().sum::<f64>()).sum();
            assert!((g.beta[c] - expect).abs() < 1e-12);
        }
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_and_negative_variance_are_errors() {
        let x = Tensor::<f32>::zeros(Shape4::new(1, 3, 2, 2));
        let mut p = BatchNormParams::<f32>::identity(2);
        assert!(matches!(
            batchnorm_forward(&x, &mut p, BnMode::Train),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut p = BatchNormParams::<f32>::identity(3);
        p.running_var[1] = -1.0;
        assert_eq!(
            batchnorm_forward(&x, &mut p, BnMode::Eval).unwrap_err(),
            Error::NegativeVariance
        );
    }
}
