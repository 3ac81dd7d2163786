use alloc::format;

use crate::error::{shape_err, Error, Result};
use crate::ops::batchnorm::BatchNormParams;
use crate::ops::conv::ConvParams;
use crate::tensor::Real;

/// Absorbs an eval-mode batch norm into the preceding convolution:
/// `w' = w * g / sqrt(var + eps)`, `b' = (b - mean) * g / sqrt(var + eps) + beta`.
pub fn fold_batchnorm<T: Real>(
    conv: &ConvParams<T>,
    bn: &BatchNormParams<T>,
) -> Result<ConvParams<T>> {
    let c_out = conv.out_channels();
    if bn.channels() != c_out {
        return Err(shape_err(
            "fold_batchnorm",
            format!(
                "{} batch-norm channels after {} conv outputs",
                bn.channels(),
                c_out
            ),
        ));
    }
    let mut folded = conv.clone();
    let per_out = conv.weight.shape().item();
    for c in 0..c_out {
        let denom = bn.running_var[c] + bn.epsilon;
        if !(denom > T::zero()) {
            return Err(Error::NegativeVariance);
        }
        let scale = bn.gamma[c] / denom.sqrt();
        for w in &mut folded.weight.data_mut()[c * per_out..(c + 1) * per_out] {
            *w = *w * scale;
        }
        folded.bias[c] = (conv.bias[c] - bn.running_mean[c]) * scale + bn.beta[c];
    }
    Ok(folded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::batchnorm::DEFAULT_EPSILON;
    use crate::tensor::{Shape4, Tensor};
    use alloc::vec;

    fn conv() -> ConvParams<f32> {
        let w = Tensor::from_fn(Shape4::new(2, 3, 3, 3), |o, i, h, w| {
            ((o * 27 + i * 9 + h * 3 + w) % 7) as f32 * 0.1 - 0.3
        });
        ConvParams::new(w, vec![0.2, -0.4], 1, 1).unwrap()
    }

    #[test]
    fn identity_normalization_leaves_conv_unchanged() {
        let c = conv();
        let mut bn = BatchNormParams::<f32>::identity(2);
        bn.running_var = vec![1.0 - DEFAULT_EPSILON as f32; 2];
        let f = fold_batchnorm(&c, &bn).unwrap();
        assert!(f.weight.max_abs_diff(&c.weight).unwrap() < 1e-6);
        assert!((f.bias[0] - 0.2).abs() < 1e-6 && (f.bias[1] + 0.4).abs() < 1e-6);
    }

    #[test]
    fn zero_gamma_leaves_only_beta() {
        let mut bn = BatchNormParams::<f32>::identity(2);
        bn.gamma = vec![0.0, 0.0];
        bn.beta = vec![0.7, -0.1];
        bn.running_mean = vec![3.0, 1.0];
        let f = fold_batchnorm(&conv(), &bn).unwrap();
        assert!(f.weight.data().iter().all(|&w| w == 0.0));
        assert_eq!(f.bias, vec![0.7, -0.1]);
    }

    #[test]
    fn non_positive_denominator_is_an_error() {
        let mut bn = BatchNormParams::<f32>::identity(2);
        bn.running_var[0] = -1.0;
        assert_eq!(
            fold_batchnorm(&conv(), &bn).unwrap_err(),
            Error::NegativeVariance
        );
    }
}
