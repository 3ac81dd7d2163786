//! Forward and backward kernels. Every kernel is generic over [`Real`] so the
//! same code runs in `f32` for training and `f64` for gradient checking.
//!
//! [`Real`]: crate::tensor::Real

pub mod batchnorm;
pub mod conv;
pub mod fold;
pub mod pointwise;

pub use batchnorm::{
    batch_statistics, batchnorm_backward, batchnorm_forward, batchnorm_normalize, BatchNormParams,
    BatchStats, BnGrads, BnMode,
};
pub use conv::{
    conv2d_backward, conv2d_forward, conv2d_param_grads, conv_output_hw, ConvGrads, ConvParams,
};
pub use fold::fold_batchnorm;
pub use pointwise::{pointwise, pointwise_backward, sigmoid, Pointwise};
