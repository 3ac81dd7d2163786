//! Synthetic gradient modules.
//!
//! An SGM sits after a `conv-bn-relu` block. In the forward pass of the model
//! it is a no-op; its own computation maps the block output plus three
//! constant label channels `(q, sin, cos)` through
//! `conv1 -> batch norm -> ReLU -> conv2` to an estimate of the loss gradient
//! with respect to that block output. Convolutions are same-padded so the
//! estimate has the activation's shape.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::head::GraspLabel;
use crate::model::ModelConfig;
use crate::ops::{
    batch_statistics, batchnorm_backward, batchnorm_normalize, conv2d_backward, conv2d_forward,
    conv2d_param_grads, fold_batchnorm, BatchNormParams, BatchStats, ConvParams,
};
use crate::optim::Optimizer;
use crate::rng::{fan_in_uniform, stream};
use crate::tensor::{Shape4, Tensor};

pub const LABEL_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SgmLoss {
    L1,
    #[default]
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SgmConfig {
    /// Zero-based index of the model layer whose output this SGM reads.
    pub attach_layer: usize,
    /// Channels of the attached activation.
    pub channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// Append the three label channels to the input.
    pub use_label: bool,
}

impl SgmConfig {
    pub fn input_channels(&self) -> usize {
        self.channels + if self.use_label { LABEL_CHANNELS } else { 0 }
    }

    pub fn param_count(&self, with_bn: bool) -> usize {
        let k2 = self.kernel * self.kernel;
        let conv1 = self.input_channels() * self.hidden * k2 + self.hidden;
        let conv2 = self.hidden * self.channels * k2 + self.channels;
        conv1 + conv2 + if with_bn { 2 * self.hidden } else { 0 }
    }

    /// One SGM per layer except the head: 3x3 kernels on the first three
    /// blocks, 1x1 afterwards, hidden width equal to the block width.
    pub fn reference_set(model: &ModelConfig) -> Vec<SgmConfig> {
        let n = model.layers.len();
        model.layers[..n.saturating_sub(1)]
            .iter()
            .enumerate()
            .map(|(i, l)| SgmConfig {
                attach_layer: i,
                channels: l.out_channels,
                hidden: l.out_channels,
                kernel: if i < 3 { 3 } else { 1 },
                use_label: true,
            })
            .collect()
    }

    /// Upper bound on transient bytes of one forward evaluation on an
    /// activation of `shape`: label-augmented input, hidden map and output.
    pub fn working_set_bytes(&self, shape: Shape4) -> usize {
        (self.input_channels() + self.hidden + self.channels)
            * shape.n
            * shape.plane()
            * core::mem::size_of::<f32>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgModule {
    pub config: SgmConfig,
    pub conv1: ConvParams,
    /// `None` once folded into `conv1`.
    pub bn: Option<BatchNormParams>,
    pub conv2: ConvParams,
    pub is_static: bool,
}

struct SgmTrace {
    input: Tensor,
    conv1_out: Tensor,
    stats: Option<BatchStats>,
    hidden: Tensor,
    output: Tensor,
    peak_bytes: usize,
}

impl SgModule {
    /// Fan-in scaled uniform weights, identity batch norm, non-static.
    pub fn new(config: SgmConfig, seed: u64) -> Result<Self> {
        let k = config.kernel;
        if k % 2 == 0 {
            return Err(Error::InvalidConfig(
                "SGM kernel must be odd for same padding".into(),
            ));
        }
        let mut rng = stream(seed, 0x53_474d, config.attach_layer as u64);
        let w1 = fan_in_uniform(
            &mut rng,
            Shape4::new(config.hidden, config.input_channels(), k, k),
            config.input_channels() * k * k,
        );
        let w2 = fan_in_uniform(
            &mut rng,
            Shape4::new(config.channels, config.hidden, k, k),
            config.hidden * k * k,
        );
        Ok(Self {
            config,
            conv1: ConvParams::new(w1, vec![0.0; config.hidden], 1, k / 2)?,
            bn: Some(BatchNormParams::identity(config.hidden)),
            conv2: ConvParams::new(w2, vec![0.0; config.channels], 1, k / 2)?,
            is_static: false,
        })
    }

    /// Fan-in `conv1`, zero `conv2`: the module starts out emitting zero
    /// gradients. Used to initialize meta-pretraining.
    pub fn zero_output(config: SgmConfig, seed: u64) -> Result<Self> {
        let mut s = Self::new(config, seed)?;
        s.conv2.weight.data_mut().fill(0.0);
        Ok(s)
    }

    pub fn zeros(config: SgmConfig) -> Result<Self> {
        let mut s = Self::new(config, 0)?;
        s.conv1.weight.data_mut().fill(0.0);
        s.conv2.weight.data_mut().fill(0.0);
        Ok(s)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.bn.as_ref().map_or(0, BatchNormParams::param_count)
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = vec![self.conv1.weight.data(), &self.conv1.bias];
        if let Some(bn) = &self.bn {
            v.push(&bn.gamma);
            v.push(&bn.beta);
        }
        v.push(self.conv2.weight.data());
        v.push(&self.conv2.bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = vec![self.conv1.weight.data_mut(), &mut self.conv1.bias];
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v.push(self.conv2.weight.data_mut());
        v.push(&mut self.conv2.bias);
        v
    }

    /// Parameters followed by batch-norm running statistics.
    pub fn state(&self) -> Vec<&[f32]> {
        let mut v = self.params();
        if let Some(bn) = &self.bn {
            v.push(&bn.running_mean);
            v.push(&bn.running_var);
        }
        v
    }

    pub fn state_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = vec![self.conv1.weight.data_mut(), &mut self.conv1.bias];
        let mut tail: Vec<&mut [f32]> = Vec::new();
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
            tail.push(&mut bn.running_mean);
            tail.push(&mut bn.running_var);
        }
        v.push(self.conv2.weight.data_mut());
        v.push(&mut self.conv2.bias);
        v.extend(tail);
        v
    }

    fn augmented_input(&self, activation: &Tensor, labels: &[GraspLabel]) -> Result<Tensor> {
        let s = activation.shape();
        if s.c != self.config.channels {
            return Err(shape_err(
                "sgm_forward",
                format!(
                    "activation has {} channels, SGM expects {}",
                    s.c, self.config.channels
                ),
            ));
        }
        if labels.len() != s.n {
            return Err(shape_err(
                "sgm_forward",
                format!("{} labels for batch of {}", labels.len(), s.n),
            ));
        }
        if !self.config.use_label {
            return Ok(activation.clone());
        }
        let values: Vec<f32> = labels.iter().flat_map(GraspLabel::channels).collect();
        activation.concat_constant_channels(LABEL_CHANNELS, &values)
    }

    fn trace(
        &self,
        activation: &Tensor,
        labels: &[GraspLabel],
        train_bn: bool,
    ) -> Result<SgmTrace> {
        let input = self.augmented_input(activation, labels)?;
        let conv1_out = conv2d_forward(&input, &self.conv1)?;
        let mut peak = input.nbytes() + conv1_out.nbytes();
        let (mut hidden, stats) = match &self.bn {
            Some(bn) => {
                let stats = if train_bn {
                    batch_statistics(&conv1_out)?
                } else {
                    bn.running_stats()
                };
                (batchnorm_normalize(&conv1_out, bn, &stats)?, Some(stats))
            }
            None => (conv1_out.clone(), None),
        };
        peak = peak.max(conv1_out.nbytes() + hidden.nbytes());
        hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let output = conv2d_forward(&hidden, &self.conv2)?;
        peak = peak.max(hidden.nbytes() + output.nbytes());
        Ok(SgmTrace {
            input,
            conv1_out,
            stats,
            hidden,
            output,
            peak_bytes: peak,
        })
    }

    /// Synthetic gradient for `activation`. Static modules normalize with
    /// running statistics, trainable ones with batch statistics.
    pub fn forward(&self, activation: &Tensor, labels: &[GraspLabel]) -> Result<Tensor> {
        Ok(self.forward_measured(activation, labels)?.0)
    }

    /// Like [`SgModule::forward`], also returning the peak bytes of
    /// intermediate buffers alive at the same time.
    pub fn forward_measured(
        &self,
        activation: &Tensor,
        labels: &[GraspLabel],
    ) -> Result<(Tensor, usize)> {
        let t = self.trace(activation, labels, !self.is_static)?;
        Ok((t.output, t.peak_bytes))
    }

    /// One optimizer step regressing the synthetic gradient onto `true_grad`.
    /// Returns the loss before the step. The L2 loss is the mean squared
    /// error, the L1 loss the mean absolute error, over all elements.
    pub fn supervise_step(
        &mut self,
        activation: &Tensor,
        labels: &[GraspLabel],
        true_grad: &Tensor,
        loss: SgmLoss,
        opt: &mut Optimizer,
    ) -> Result<f32> {
        if self.is_static {
            return Err(Error::StaticSgm);
        }
        true_grad.expect_shape(activation.shape(), "sgm_supervise_step")?;
        let t = self.trace(activation, labels, true)?;
        let m = t.output.len() as f32;
        let mut value = 0.0f64;
        let grad_out = t.output.zip_map(true_grad, |p, y| {
            let d = p - y;
            match loss {
                SgmLoss::L2 => {
                    value += (d as f64) * (d as f64);
                    2.0 * d / m
                }
                SgmLoss::L1 => {
                    value += (d as f64).abs();
                    if d > 0.0 {
                        1.0 / m
                    } else if d < 0.0 {
                        -1.0 / m
                    } else {
                        0.0
                    }
                }
            }
        })?;
        let value = (value / m as f64) as f32;

        let g2 = conv2d_backward(&t.hidden, &self.conv2, &grad_out)?;
        let mut gh = g2.input.expect("input gradient requested");
        for (g, &h) in gh.data_mut().iter_mut().zip(t.hidden.data()) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        let mut bn_grads = None;
        if let (Some(bn), Some(stats)) = (&self.bn, &t.stats) {
            let bg = batchnorm_backward(&t.conv1_out, bn, stats, &gh)?;
            gh = bg.input;
            bn_grads = Some((bg.gamma, bg.beta));
        }
        let g1 = conv2d_param_grads(&t.input, &self.conv1, &gh)?;

        let mut grads = vec![g1.weight.into_data(), g1.bias];
        if let Some((gamma, beta)) = bn_grads {
            grads.push(gamma);
            grads.push(beta);
        }
        grads.push(g2.weight.into_data());
        grads.push(g2.bias);
        opt.step(self.params_mut(), &grads)?;
        if let (Some(bn), Some(stats)) = (&mut self.bn, &t.stats) {
            bn.update_running(stats);
        }
        Ok(value)
    }

    /// Folds the (eval-mode) batch norm into `conv1`. Only static modules can
    /// be folded, since a trainable module still needs batch statistics.
    pub fn fold(&self) -> Result<SgModule> {
        if !self.is_static {
            return Err(Error::NonStaticSgm);
        }
        let Some(bn) = &self.bn else {
            return Ok(self.clone());
        };
        Ok(SgModule {
            config: self.config,
            conv1: fold_batchnorm(&self.conv1, bn)?,
            bn: None,
            conv2: self.conv2.clone(),
            is_static: true,
        })
    }
}

/// The model-side view of an SGM: the activation passes through untouched.
#[inline]
pub fn sgm_noop_passthrough(activation: Tensor) -> Tensor {
    activation
}

pub fn fold_static_sgm(sgm: &SgModule) -> Result<SgModule> {
    sgm.fold()
}

pub fn build_sgms(configs: &[SgmConfig], seed: u64) -> Result<Vec<SgModule>> {
    configs.iter().map(|c| SgModule::new(*c, seed)).collect()
}

pub fn build_sgms_zero_output(configs: &[SgmConfig], seed: u64) -> Result<Vec<SgModule>> {
    configs
        .iter()
        .map(|c| SgModule::zero_output(*c, seed))
        .collect()
}
