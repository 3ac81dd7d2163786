//! The six-layer fully-convolutional grasp network.
//!
//! Every layer is a block `conv -> [batch norm] -> [ReLU]`. The last layer is
//! a bare 1x1 convolution producing the raw three-channel head. All
//! convolutions are unpadded, so a crop embedded in a larger frame at a
//! stride-aligned position yields exactly the matching heatmap pixel.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{shape_err, Error, Result};
use crate::head::HEAD_CHANNELS;
use crate::ops::{
    batch_statistics, batchnorm_backward, batchnorm_normalize, conv2d_backward, conv2d_forward,
    conv2d_param_grads, conv_output_hw, BatchNormParams, BatchStats, BnMode, ConvParams,
};
use crate::rng::{fan_in_uniform, stream};
use crate::tensor::{Shape4, Tensor};

/// `(C, H, W)` of a training crop.
pub const CROP_SHAPE: (usize, usize, usize) = (3, 128, 128);
/// `(C, H, W)` of a full 640x480 camera frame.
pub const FRAME_SHAPE: (usize, usize, usize) = (3, 480, 640);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bn: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn block(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: 0,
            has_bn: true,
            activation: Activation::Relu,
        }
    }

    pub fn head(name: &str, in_channels: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels: HEAD_CHANNELS,
            kernel: 1,
            stride: 1,
            padding: 0,
            has_bn: false,
            activation: Activation::None,
        }
    }

    /// Convolution weights and bias, plus `gamma`/`beta` when batch-normed.
    pub fn param_count(&self) -> usize {
        let conv =
            self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels;
        conv + if self.has_bn {
            2 * self.out_channels
        } else {
            0
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_output_hw(h, w, self.kernel, self.stride, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub bn_epsilon: f32,
    pub bn_momentum: f32,
}

impl ModelConfig {
    /// The reference architecture: total stride 16, receptive field 125 px.
    /// A 128x128 crop maps to a single head pixel and a 640x480 frame to a
    /// 33x23 heatmap. On a crop, layers 4 and 5 already produce single
    /// pixels, so their 1x1 SGMs see the whole activation.
    pub fn reference() -> Self {
        Self {
            input_channels: 3,
            layers: vec![
                LayerSpec::block("conv1", 3, 8, 5, 2),
                LayerSpec::block("conv2", 8, 8, 5, 2),
                LayerSpec::block("conv3", 8, 16, 5, 4),
                LayerSpec::block("conv4", 16, 16, 7, 1),
                LayerSpec::block("conv5", 16, 16, 1, 1),
                LayerSpec::head("head", 16),
            ],
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::InvalidConfig("model has no layers".into()));
        };
        let mut channels = self.input_channels;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != channels {
                return Err(Error::InvalidConfig(format!(
                    "layer {} expects {} input channels but receives {}",
                    i + 1,
                    l.in_channels,
                    channels
                )));
            }
            if l.kernel == 0 || l.stride == 0 || l.out_channels == 0 {
                return Err(Error::InvalidConfig(format!(
                    "layer {} has a zero extent",
                    i + 1
                )));
            }
            channels = l.out_channels;
        }
        if last.out_channels != HEAD_CHANNELS || last.has_bn || last.activation != Activation::None
        {
            return Err(Error::InvalidConfig(
                "last layer must be a bare convolution with three output channels".into(),
            ));
        }
        if !(self.bn_epsilon > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::InvalidConfig(
                "batch-norm epsilon/momentum out of range".into(),
            ));
        }
        Ok(())
    }

    /// Output `(C, H, W)` of every layer for an `h x w` input.
    pub fn layer_shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        let (mut h, mut w) = (h, w);
        self.layers
            .iter()
            .map(|l| {
                (h, w) = l.output_hw(h, w)?;
                Ok((l.out_channels, h, w))
            })
            .collect()
    }

    pub fn output_shape(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        self.layer_shapes(h, w)?
            .last()
            .copied()
            .ok_or_else(|| Error::InvalidConfig("model has no layers".into()))
    }

    /// Indices of the trailing `k` layers.
    pub fn trailing(&self, k: usize) -> Result<Range<usize>> {
        let n = self.layers.len();
        if k == 0 || k > n {
            return Err(Error::InvalidConfig(format!(
                "cannot train the last {} of {} layers",
                k, n
            )));
        }
        Ok(n - k..n)
    }

    /// FNV-1a digest of the architecture, stored in checkpoints.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(self.input_channels as u64);
        eat(self.layers.len() as u64);
        for l in &self.layers {
            for v in [l.in_channels, l.out_channels, l.kernel, l.stride, l.padding] {
                eat(v as u64);
            }
            eat(l.has_bn as u64);
            eat(matches!(l.activation, Activation::Relu) as u64);
        }
        eat(self.bn_epsilon.to_bits() as u64);
        eat(self.bn_momentum.to_bits() as u64);
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub conv: ConvParams,
    pub bn: Option<BatchNormParams>,
}

/// Intermediates of one block forward pass that its backward pass needs.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Pre-normalization convolution output, kept only for batch-normed blocks.
    pub conv_out: Option<Tensor>,
    pub stats: Option<BatchStats>,
    pub output: Tensor,
}

impl LayerTrace {
    pub fn retained_bytes(&self) -> usize {
        self.output.nbytes() + self.conv_out.as_ref().map_or(0, Tensor::nbytes)
    }
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    /// Same order as [`Layer::params`].
    pub params: Vec<Vec<f32>>,
    pub input: Option<Tensor>,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.as_ref().map_or(0, BatchNormParams::param_count)
    }

    /// Trainable tensors: conv weight, conv bias, then `gamma`, `beta`.
    pub fn params(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = vec![self.conv.weight.data(), &self.conv.bias];
        if let Some(bn) = &self.bn {
            v.push(&bn.gamma);
            v.push(&bn.beta);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = vec![self.conv.weight.data_mut(), &mut self.conv.bias];
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
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
        let mut v: Vec<&mut [f32]> = vec![self.conv.weight.data_mut(), &mut self.conv.bias];
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
            v.push(&mut bn.running_mean);
            v.push(&mut bn.running_var);
        }
        v
    }

    /// Block forward pass. Train mode normalizes with batch statistics but
    /// does not touch the running statistics; see [`Layer::commit_stats`].
    pub fn forward(&self, input: &Tensor, mode: BnMode) -> Result<LayerTrace> {
        let z = conv2d_forward(input, &self.conv)?;
        let (mut y, conv_out, stats) = match &self.bn {
            Some(bn) => {
                let stats = match mode {
                    BnMode::Train => batch_statistics(&z)?,
                    BnMode::Eval => bn.running_stats(),
                };
                let y = batchnorm_normalize(&z, bn, &stats)?;
                (y, Some(z), Some(stats))
            }
            None => (z, None, None),
        };
        if self.spec.activation == Activation::Relu {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(LayerTrace {
            conv_out,
            stats,
            output: y,
        })
    }

    /// Eval-mode forward that keeps only the output.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input, BnMode::Eval)?.output)
    }

    /// Folds train-mode batch statistics of `trace` into the running statistics.
    pub fn commit_stats(&mut self, trace: &LayerTrace) {
        if let (Some(bn), Some(stats)) = (&mut self.bn, &trace.stats) {
            if stats.mode == BnMode::Train {
                bn.update_running(stats);
            }
        }
    }

    pub fn backward(
        &self,
        input: &Tensor,
        trace: &LayerTrace,
        grad_out: &Tensor,
        want_input: bool,
    ) -> Result<LayerGrads> {
        grad_out.expect_shape(trace.output.shape(), "layer backward")?;
        let mut g = grad_out.clone();
        if self.spec.activation == Activation::Relu {
            for (gv, &a) in g.data_mut().iter_mut().zip(trace.output.data()) {
                if a <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let mut bn_grads = None;
        if let Some(bn) = &self.bn {
            let z = trace
                .conv_out
                .as_ref()
                .ok_or(Error::InvalidConfig("trace lacks conv output".into()))?;
            let stats = trace
                .stats
                .as_ref()
                .ok_or(Error::InvalidConfig("trace lacks statistics".into()))?;
            let bg = batchnorm_backward(z, bn, stats, &g)?;
            g = bg.input;
            bn_grads = Some((bg.gamma, bg.beta));
        }
        let cg = if want_input {
            conv2d_backward(input, &self.conv, &g)?
        } else {
            conv2d_param_grads(input, &self.conv, &g)?
        };
        let mut params = vec![cg.weight.into_data(), cg.bias];
        if let Some((gamma, beta)) = bn_grads {
            params.push(gamma);
            params.push(beta);
        }
        Ok(LayerGrads {
            params,
            input: cg.input,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
}

/// Deterministic fan-in-scaled uniform initialization.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let layers = config
        .layers
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut rng = stream(seed, 0x004d_4f44_454c, i as u64);
            let shape = Shape4::new(
                spec.out_channels,
                spec.in_channels,
                spec.kernel,
                spec.kernel,
            );
            let weight = fan_in_uniform(
                &mut rng,
                shape,
                spec.in_channels * spec.kernel * spec.kernel,
            );
            let conv = ConvParams::new(
                weight,
                vec![0.0; spec.out_channels],
                spec.stride,
                spec.padding,
            )?;
            let bn = spec.has_bn.then(|| {
                let mut bn = BatchNormParams::identity(spec.out_channels);
                bn.epsilon = config.bn_epsilon;
                bn.momentum = config.bn_momentum;
                bn
            });
            Ok(Layer {
                spec: spec.clone(),
                conv,
                bn,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model { config, layers })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Capture {
    /// Keep every layer output alive until the pass ends.
    All,
    /// Keep only the most recent layer output.
    Streaming,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub head_raw: Tensor,
    /// Every layer output in order; empty for streaming capture.
    pub activations: Vec<Tensor>,
    pub peak_retained_bytes: usize,
}

/// Eval-mode forward pass with activation retention accounting. The input
/// batch itself is not counted.
pub fn model_forward(model: &Model, batch: &Tensor, capture: Capture) -> Result<ForwardOutput> {
    model.check_input(batch)?;
    let mut activations = Vec::new();
    let (mut live, mut peak) = (0usize, 0usize);
    let mut x: Option<Tensor> = None;
    for layer in &model.layers {
        let out = layer.infer(x.as_ref().unwrap_or(batch))?;
        match capture {
            Capture::All => {
                live += out.nbytes();
                peak = peak.max(live);
                activations.push(out.clone());
            }
            Capture::Streaming => {
                // the previous output is dropped once this one exists
                live = out.nbytes();
                peak = peak.max(live);
            }
        }
        x = Some(out);
    }
    Ok(ForwardOutput {
        head_raw: x.expect("validated model has layers"),
        activations,
        peak_retained_bytes: peak,
    })
}

impl Model {
    pub fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().c != self.config.input_channels {
            return Err(shape_err(
                "model_forward",
                format!(
                    "batch has {} channels, model expects {}",
                    batch.shape().c,
                    self.config.input_channels
                ),
            ));
        }
        self.config
            .output_shape(batch.shape().h, batch.shape().w)
            .map(|_| ())
    }

    /// Eval-mode raw head.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_range(0..self.layers.len(), batch)
    }

    /// Eval-mode pass through `layers[range]`.
    pub fn forward_range(&self, range: Range<usize>, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers[range] {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::param_count).collect()
    }
}
