//! First-order meta-pretraining of the model and its SGMs.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::step::{ff_finetune_step, OnlineSgm};
use super::Features;
use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::stream;
use crate::sgm::{SgModule, SgmLoss};
use crate::taskgen::Sample;

const TAG_META: u64 = 0x4d45_5441;

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub meta_iterations: usize,
    /// Feed-forward steps on one task before the outer update.
    pub inner_steps: usize,
    pub inner_optimizer: OptimizerConfig,
    pub sgm_optimizer: OptimizerConfig,
    /// Outer interpolation `theta <- theta0 + beta (thetaK - theta0)`.
    pub outer_step: f32,
    pub batch_size: usize,
    /// Trailing layers adapted in the inner loop; the rest stay frozen.
    pub layers: usize,
    pub sgm_loss: SgmLoss,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            meta_iterations: 300,
            inner_steps: 20,
            inner_optimizer: OptimizerConfig::sgd(0.1, 0.9),
            sgm_optimizer: OptimizerConfig::sgd(0.1, 0.9),
            outer_step: 0.5,
            batch_size: 32,
            layers: 6,
            sgm_loss: SgmLoss::L2,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(self.outer_step > 0.0 && self.outer_step <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "outer step {} outside (0, 1]",
                self.outer_step
            )));
        }
        if self.layers == 0 || self.layers > num_layers {
            return Err(Error::InvalidConfig(format!(
                "meta layers must lie in 1..={}, got {}",
                num_layers, self.layers
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch size must be at least 2".into()));
        }
        self.inner_optimizer.validate()?;
        self.sgm_optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaRecord {
    pub iteration: usize,
    pub task: usize,
    /// Mean loss of the inner steps.
    pub model_loss: f32,
    /// Mean pre-step SGM supervision loss over inner steps and modules.
    pub sgm_loss: f32,
}

fn interpolate(layer: &mut Layer, start: &Layer, beta: f32) {
    for (w, w0) in layer.state_mut().into_iter().zip(start.state()) {
        for (a, &b) in w.iter_mut().zip(w0) {
            *a = b + beta * (*a - b);
        }
    }
}

/// Meta-pretrains `model` and `sgms` on `tasks` (the training samples of
/// each task). Each iteration picks a task, adapts the trailing
/// `cfg.layers` layers for `cfg.inner_steps` feed-forward steps while every
/// SGM is supervised by the true gradient of the same batch, then moves the
/// model only part of the way towards the adapted weights. SGM parameters
/// and their optimizer state carry over between tasks. The SGMs come back
/// marked static.
pub fn meta_pretrain(
    model: &mut Model,
    sgms: &mut [SgModule],
    tasks: &[&[Sample]],
    cfg: &MetaConfig,
) -> Result<Vec<MetaRecord>> {
    let n = model.layers.len();
    cfg.validate(n)?;
    if tasks.is_empty() || tasks.iter().any(|t| t.is_empty()) {
        return Err(Error::EmptyInput("meta_pretrain tasks"));
    }
    if tasks.len() < 2 {
        return Err(Error::InvalidConfig(
            "meta-pretraining needs at least two tasks".into(),
        ));
    }
    let start = n - cfg.layers;
    for i in start..n - 1 {
        if !sgms.iter().any(|s| s.config.attach_layer == i) {
            return Err(Error::MissingSgm(i));
        }
    }
    if cfg.inner_steps == 0 {
        return Ok(Vec::new());
    }
    for s in sgms.iter_mut() {
        s.is_static = false;
    }

    let feats = tasks
        .iter()
        .map(|t| Features::compute(model, start, &t.iter().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let mut sgm_opts = sgms
        .iter()
        .map(|_| Optimizer::new(cfg.sgm_optimizer))
        .collect::<Result<Vec<_>>>()?;

    let mut curve = Vec::with_capacity(cfg.meta_iterations);
    for it in 0..cfg.meta_iterations {
        let mut rng = stream(cfg.seed, TAG_META, it as u64);
        let t = rng.gen_range(0..tasks.len());
        let f = &feats[t];
        let mut order: Vec<usize> = (0..f.len()).collect();
        order.shuffle(&mut rng);
        let bs = cfg.batch_size.min(f.len());

        let theta0: Vec<Layer> = model.layers[start..].to_vec();
        let mut opts = (start..n)
            .map(|_| Optimizer::new(cfg.inner_optimizer))
            .collect::<Result<Vec<_>>>()?;
        let (mut model_loss, mut sgm_loss, mut sgm_steps) = (0.0f64, 0.0f64, 0usize);
        for step in 0..cfg.inner_steps {
            let batch: Vec<usize> = (0..bs)
                .map(|j| order[(step * bs + j) % order.len()])
                .collect();
            let (x, labels) = f.batch(&batch)?;
            let online = OnlineSgm {
                opts: &mut sgm_opts,
                loss: cfg.sgm_loss,
                update: &[],
            };
            let report = ff_finetune_step(
                model,
                sgms,
                &x,
                &labels,
                start,
                &mut opts,
                Some(online),
                None,
            )?;
            model_loss += report.loss.total as f64;
            if let Some(v) = report.sgm_loss {
                sgm_loss += v as f64;
                sgm_steps += 1;
            }
        }
        for (layer, l0) in model.layers[start..].iter_mut().zip(&theta0) {
            interpolate(layer, l0, cfg.outer_step);
        }
        curve.push(MetaRecord {
            iteration: it,
            task: t,
            model_loss: (model_loss / cfg.inner_steps as f64) as f32,
            sgm_loss: if sgm_steps > 0 {
                (sgm_loss / sgm_steps as f64) as f32
            } else {
                f32::NAN
            },
        });
    }
    for s in sgms.iter_mut() {
        s.is_static = true;
    }
    Ok(curve)
}
