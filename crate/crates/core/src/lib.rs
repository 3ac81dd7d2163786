//! Numeric core for feed-forward fine-tuning of a small fully-convolutional
//! grasp network with static synthetic gradient modules (SGMs).
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything here is pure computation: tensors and hand-written
//! forward/backward kernels, the six-layer grasp model and its loss head,
//! synthetic gradient modules, optimizers, the backprop and feed-forward
//! training loops, meta-pretraining, a procedural task generator, and the
//! resource accountant. File formats, configuration and the command line
//! live in the `sgm-tools` crate.
//!
//! All randomness is seeded; identical inputs produce bit-identical outputs.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod accounting;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod sgm;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use head::{decode_angle, encode_angle, wrap_angle, GraspLabel};
pub use model::{build_model, Activation, LayerSpec, Model, ModelConfig};
pub use sgm::{SgModule, SgmConfig, SgmLoss};
pub use tensor::{Real, Shape4, Tensor};
