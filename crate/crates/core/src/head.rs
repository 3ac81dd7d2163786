//! Grasp head: label encoding, output squashing and the two-task loss.
//!
//! The head has three channels: grasp quality, sine and cosine of the grasp
//! angle. Quality and cosine pass through a sigmoid, sine through a tanh, so a
//! decoded angle `atan2(sin, cos)` always lands in `(-pi/2, pi/2)`.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{shape_err, Error, Result};
use crate::ops::pointwise::sigmoid;
use crate::tensor::{Real, Shape4, Tensor};

pub const HEAD_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraspLabel {
    pub positive: bool,
    /// Radians in `(-pi/2, pi/2]`. Ignored by the loss when `positive` is false.
    pub angle: f32,
}

impl GraspLabel {
    pub fn new(positive: bool, angle: f32) -> Result<Self> {
        let label = Self { positive, angle };
        label.validate()?;
        Ok(label)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.angle as f64;
        if !a.is_finite() || a <= -FRAC_PI_2 - 1e-6 || a > FRAC_PI_2 + 1e-6 {
            return Err(Error::InvalidLabel(format!(
                "angle {} outside (-pi/2, pi/2]",
                self.angle
            )));
        }
        Ok(())
    }

    pub fn quality(&self) -> f32 {
        if self.positive {
            1.0
        } else {
            0.0
        }
    }

    /// The three target channels `(q, sin, cos)`.
    pub fn channels(&self) -> [f32; 3] {
        let (s, c) = encode_angle(self.angle);
        [self.quality(), s, c]
    }
}

pub fn encode_angle<T: Real>(theta: T) -> (T, T) {
    (theta.sin(), theta.cos())
}

pub fn decode_angle<T: Real>(sin: T, cos: T) -> Result<T> {
    if sin == T::zero() && cos == T::zero() {
        return Err(Error::DegenerateAngle);
    }
    Ok(sin.atan2(cos))
}

/// Maps any angle onto `(-pi/2, pi/2]` by adding multiples of pi.
pub fn wrap_angle<T: Real>(theta: T) -> T {
    let pi = T::lit(PI);
    let k = ((theta - T::lit(FRAC_PI_2)) / pi).ceil();
    let mut r = theta - k * pi;
    // rounding can leave r a hair outside the interval
    if r <= -T::lit(FRAC_PI_2) {
        r = r + pi;
    } else if r > T::lit(FRAC_PI_2) {
        r = r - pi;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraspPrediction {
    pub quality: f32,
    pub sin: f32,
    pub cos: f32,
}

impl GraspPrediction {
    pub fn angle(&self) -> Result<f32> {
        decode_angle(self.sin, self.cos)
    }
}

fn check_head<T: Real>(head: &Tensor<T>, op: &'static str) -> Result<Shape4> {
    let s = head.shape();
    if s.c != HEAD_CHANNELS {
        return Err(shape_err(
            op,
            format!("head has {} channels, expected 3", s.c),
        ));
    }
    Ok(s)
}

/// Sigmoid on quality, tanh on sine, sigmoid on cosine; works on crop outputs
/// and full heatmaps alike.
pub fn head_squash<T: Real>(head_raw: &Tensor<T>) -> Result<Tensor<T>> {
    let s = check_head(head_raw, "head_squash")?;
    let mut out = head_raw.clone();
    for n in 0..s.n {
        for v in out.plane_mut(n, 0) {
            *v = sigmoid(*v);
        }
        for v in out.plane_mut(n, 1) {
            *v = v.tanh();
        }
        for v in out.plane_mut(n, 2) {
            *v = sigmoid(*v);
        }
    }
    Ok(out)
}

/// Per-sample predictions from a crop-mode head `(N, 3, 1, 1)`.
pub fn predictions(head_raw: &Tensor<f32>) -> Result<Vec<GraspPrediction>> {
    let s = check_head(head_raw, "predictions")?;
    if s.h != 1 || s.w != 1 {
        return Err(shape_err(
            "predictions",
            format!("crop head must be 1x1, got {}x{}", s.h, s.w),
        ));
    }
    let sq = head_squash(head_raw)?;
    Ok((0..s.n)
        .map(|n| {
            let d = sq.item_data(n);
            GraspPrediction {
                quality: d[0],
                sin: d[1],
                cos: d[2],
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<T = f32> {
    pub total: T,
    pub quality: T,
    pub angle: T,
}

fn check_labels(labels: &[GraspLabel]) -> Result<()> {
    labels.iter().try_for_each(GraspLabel::validate)
}

/// Batch-mean loss on already squashed predictions: binary cross-entropy on
/// quality plus, for positive samples only, squared error on sine and cosine.
pub fn grasp_loss(pred: &[GraspPrediction], labels: &[GraspLabel]) -> Result<LossBreakdown> {
    if pred.len() != labels.len() {
        return Err(shape_err(
            "grasp_loss",
            format!("{} predictions, {} labels", pred.len(), labels.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("grasp_loss"));
    }
    check_labels(labels)?;
    let eps = 1e-7f64;
    let (mut lq, mut la) = (0.0f64, 0.0f64);
    for (p, l) in pred.iter().zip(labels) {
        let qh = (p.quality as f64).clamp(eps, 1.0 - eps);
        lq += if l.positive {
            -qh.ln()
        } else {
            -(1.0 - qh).ln()
        };
        if l.positive {
            let (s, c) = encode_angle(l.angle as f64);
            la += (p.sin as f64 - s).powi(2) + (p.cos as f64 - c).powi(2);
        }
    }
    let n = pred.len() as f64;
    Ok(LossBreakdown {
        total: ((lq + la) / n) as f32,
        quality: (lq / n) as f32,
        angle: (la / n) as f32,
    })
}

/// Loss from the raw head `(N, 3, 1, 1)` together with its gradient with
/// respect to the raw head. Uses the logit form of the cross-entropy.
pub fn grasp_loss_raw<T: Real>(
    head_raw: &Tensor<T>,
    labels: &[GraspLabel],
) -> Result<(LossBreakdown<T>, Tensor<T>)> {
    let s = check_head(head_raw, "grasp_loss")?;
    if s.h != 1 || s.w != 1 {
        return Err(shape_err(
            "grasp_loss",
            format!("crop head must be 1x1, got {}x{}", s.h, s.w),
        ));
    }
    if labels.len() != s.n {
        return Err(shape_err(
            "grasp_loss",
            format!("{} labels for batch of {}", labels.len(), s.n),
        ));
    }
    if s.n == 0 {
        return Err(Error::EmptyInput("grasp_loss"));
    }
    check_labels(labels)?;
    let inv_n = T::one() / T::lit(s.n as f64);
    let two = T::lit(2.0);
    let (mut lq, mut la) = (T::zero(), T::zero());
    let mut grad = Tensor::zeros(s);
    for (n, label) in labels.iter().enumerate() {
        let raw = head_raw.item_data(n);
        let (zq, zs, zc) = (raw[0], raw[1], raw[2]);
        let q = if label.positive { T::one() } else { T::zero() };
        // softplus(z) - q z
        let softplus = zq.max(T::zero()) + (T::one() + (-zq.abs()).exp()).ln();
        lq = lq + softplus - q * zq;
        let g = &mut grad.data_mut()[n * 3..n * 3 + 3];
        g[0] = (sigmoid(zq) - q) * inv_n;
        if label.positive {
            let (ts, tc) = encode_angle(T::lit(label.angle as f64));
            let (sh, ch) = (zs.tanh(), sigmoid(zc));
            la = la + (sh - ts) * (sh - ts) + (ch - tc) * (ch - tc);
            g[1] = two * (sh - ts) * (T::one() - sh * sh) * inv_n;
            g[2] = two * (ch - tc) * ch * (T::one() - ch) * inv_n;
        }
    }
    let out = LossBreakdown {
        total: (lq + la) * inv_n,
        quality: lq * inv_n,
        angle: la * inv_n,
    };
    if !out.total.is_finite() {
        return Err(Error::NonFinite("grasp_loss"));
    }
    Ok((out, grad.ensure_finite("grasp_loss")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::f32::consts::FRAC_PI_4;

    #[test]
    fn encode_decode_examples() {
        assert_eq!(encode_angle(0.0f32), (0.0, 1.0));
        assert_eq!(decode_angle(0.0f32, 1.0).unwrap(), 0.0);
        let (s, c) = encode_angle(FRAC_PI_4);
        assert!((s - 2f32.sqrt() / 2.0).abs() < 1e-6 && (c - 2f32.sqrt() / 2.0).abs() < 1e-6);
        assert!((decode_angle(s, c).unwrap() - FRAC_PI_4).abs() < 1e-6);
        assert_eq!(decode_angle(0.0f32, 0.0), Err(Error::DegenerateAngle));
    }

    #[test]
    fn wrap_examples() {
        let pi = core::f64::consts::PI;
        assert!((wrap_angle(3.0 * pi / 4.0) + pi / 4.0).abs() < 1e-12);
        assert!((wrap_angle(2.0f64) - (2.0 - pi)).abs() < 1e-12);
        assert_eq!(wrap_angle(FRAC_PI_2), FRAC_PI_2);
        assert!((wrap_angle(-FRAC_PI_2) - FRAC_PI_2).abs() < 1e-12);
        assert!((wrap_angle(-7.0 * pi) - 0.0).abs() < 1e-9);
    }

    #[test]
    fn squash_of_zero() {
        let raw = Tensor::<f32>::zeros(Shape4::new(1, 3, 1, 1));
        assert_eq!(head_squash(&raw).unwrap().data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn loss_examples() {
        let pos = GraspLabel::new(true, 0.3).unwrap();
        let half = GraspPrediction {
            quality: 0.5,
            sin: 0.3f32.sin(),
            cos: 0.3f32.cos(),
        };
        let l = grasp_loss(&[half], &[pos]).unwrap();
        assert!((l.quality - core::f32::consts::LN_2).abs() < 1e-6);
        assert!(l.angle < 1e-12);

        let perfect = GraspPrediction {
            quality: 1.0,
            ..half
        };
        assert!(grasp_loss(&[perfect], &[pos]).unwrap().total < 1e-6);

        let neg = GraspLabel::new(false, 1.0).unwrap();
        let wild = GraspPrediction {
            quality: 0.2,
            sin: -0.9,
            cos: 0.01,
        };
        assert_eq!(grasp_loss(&[wild], &[neg]).unwrap().angle, 0.0);
    }

    #[test]
    fn raw_and_squashed_losses_agree() {
        let raw = Tensor::<f32>::new(
            Shape4::new(2, 3, 1, 1),
            vec![0.4, -1.2, 0.3, -2.0, 0.8, 1.1],
        )
        .unwrap();
        let labels = [
            GraspLabel::new(true, -0.7).unwrap(),
            GraspLabel::new(false, 0.0).unwrap(),
        ];
        let (raw_loss, _) = grasp_loss_raw(&raw, &labels).unwrap();
        let sq = grasp_loss(&predictions(&raw).unwrap(), &labels).unwrap();
        assert!((raw_loss.total - sq.total).abs() < 1e-5);
        assert!((raw_loss.angle - sq.angle).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        assert!(matches!(
            GraspLabel::new(true, 2.0),
            Err(Error::InvalidLabel(_))
        ));
        let raw = Tensor::<f32>::zeros(Shape4::new(1, 3, 1, 1));
        let bad = GraspLabel {
            positive: true,
            angle: 3.0,
        };
        assert!(grasp_loss_raw(&raw, &[bad]).is_err());
    }
}
