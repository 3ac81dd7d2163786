//! Detection accuracy and symmetric angle error.

use alloc::format;
use core::f64::consts::PI;

use crate::error::{shape_err, Error, Result};
use crate::head::{GraspLabel, GraspPrediction};

/// Fraction of samples where `quality > threshold` agrees with the label.
/// A score exactly at the threshold counts as a negative prediction.
pub fn detection_accuracy(
    predictions: &[GraspPrediction],
    labels: &[GraspLabel],
    threshold: f32,
) -> Result<f32> {
    if predictions.len() != labels.len() {
        return Err(shape_err(
            "detection_accuracy",
            format!("{} predictions, {} labels", predictions.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("detection_accuracy"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| (p.quality > threshold) == l.positive)
        .count();
    Ok(hits as f32 / labels.len() as f32)
}

/// Angular distance modulo pi, in radians, in `[0, pi/2]`.
pub fn symmetric_angle_error(predicted: f64, target: f64) -> f64 {
    let mut d = (predicted - target) % PI;
    if d < 0.0 {
        d += PI;
    }
    d.min(PI - d)
}

/// Mean `min(|d|, pi - |d|)` over positive samples, in degrees.
pub fn angle_mae_deg(predictions: &[GraspPrediction], labels: &[GraspLabel]) -> Result<f32> {
    if predictions.len() != labels.len() {
        return Err(shape_err(
            "angle_mae_deg",
            format!("{} predictions, {} labels", predictions.len(), labels.len()),
        ));
    }
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (p, l) in predictions.iter().zip(labels) {
        if !l.positive {
            continue;
        }
        let theta = p.angle()? as f64;
        sum += symmetric_angle_error(theta, l.angle as f64);
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoPositives);
    }
    Ok((sum / count as f64).to_degrees() as f32)
}

/// [`angle_mae_deg`] on bare angles, every sample treated as positive.
pub fn angle_mae_deg_raw(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(shape_err(
            "angle_mae_deg",
            format!("{} vs {} angles", predicted.len(), target.len()),
        ));
    }
    if predicted.is_empty() {
        return Err(Error::NoPositives);
    }
    let s: f64 = predicted
        .iter()
        .zip(target)
        .map(|(&p, &t)| symmetric_angle_error(p, t))
        .sum();
    Ok((s / predicted.len() as f64).to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn pred(quality: f32, angle: f32) -> GraspPrediction {
        GraspPrediction {
            quality,
            sin: angle.sin(),
            cos: angle.cos(),
        }
    }

    #[test]
    fn all_correct_detection() {
        let labels = [
            GraspLabel::new(true, 0.0).unwrap(),
            GraspLabel::new(false, 0.0).unwrap(),
        ];
        let preds = [pred(0.9, 0.0), pred(0.1, 0.0)];
        assert_eq!(detection_accuracy(&preds, &labels, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn tie_counts_as_negative() {
        let labels = [
            GraspLabel::new(true, 0.0).unwrap(),
            GraspLabel::new(false, 0.0).unwrap(),
        ];
        let preds = [pred(0.5, 0.0), pred(0.5, 0.0)];
        assert_eq!(detection_accuracy(&preds, &labels, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn exact_angles_have_zero_error() {
        let labels: Vec<GraspLabel> = [-1.2f32, 0.0, 0.9]
            .iter()
            .map(|&a| GraspLabel::new(true, a).unwrap())
            .collect();
        let preds: Vec<GraspPrediction> = labels.iter().map(|l| pred(0.9, l.angle)).collect();
        assert!(angle_mae_deg(&preds, &labels).unwrap() < 1e-4);
    }

    #[test]
    fn wraparound_error() {
        let e = symmetric_angle_error((-85.0f64).to_radians(), 85.0f64.to_radians());
        assert!((e.to_degrees() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn negatives_are_skipped_and_all_negative_is_an_error() {
        let labels = [GraspLabel::new(false, 0.4).unwrap()];
        assert_eq!(
            angle_mae_deg(&[pred(0.9, -0.4)], &labels).unwrap_err(),
            Error::NoPositives
        );
        assert_eq!(
            detection_accuracy(&[], &[], 0.5).unwrap_err(),
            Error::EmptyInput("detection_accuracy")
        );
    }
}
