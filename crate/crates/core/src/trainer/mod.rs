//! Fine-tuning loops (backprop baseline, static and online SGMs) and
//! meta-pretraining.
//!
//! Frozen leading layers run in eval mode and never change during a run, so
//! their outputs are computed once per sample and cached; every step starts
//! from the first trainable layer's input.

mod meta;
mod step;

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::head::{grasp_loss, predictions, GraspLabel, LossBreakdown};
use crate::metrics::{angle_mae_deg, detection_accuracy};
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{derive_seed, stream};
use crate::sgm::{build_sgms, SgModule, SgmConfig, SgmLoss};
use crate::taskgen::{Sample, Split, CHANNELS, CROP};
use crate::tensor::{Shape4, Tensor};

pub use meta::{meta_pretrain, MetaConfig, MetaRecord};
pub use step::{
    bp_step, ff_finetune_step, reference_pass, ActivationLedger, OnlineSgm, ReferencePass,
    StepReport,
};

const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_RANDOM_SGM: u64 = 0x5253_474d;
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FinetuneMode {
    Bp,
    SgmStatic,
    SgmOnline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SgmInit {
    /// Keep the SGMs handed in (normally the meta-pretrained ones).
    Trained,
    /// Replace them with freshly initialized modules of the same shape.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Number of trailing layers that train.
    pub k_layers: usize,
    pub sgm_init: SgmInit,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Online mode only.
    pub sgm_optimizer: OptimizerConfig,
    pub sgm_loss: SgmLoss,
    /// Online mode: per-layer switch for SGM updates, indexed by layer.
    /// Layers past the end of the list update.
    pub sgm_update: Vec<bool>,
}

impl FinetuneConfig {
    /// Backprop with Adam at `1e-3`, batch 32, 50 epochs.
    pub fn bp(k_layers: usize, seed: u64) -> Self {
        Self {
            mode: FinetuneMode::Bp,
            k_layers,
            sgm_init: SgmInit::Trained,
            epochs: 50,
            batch_size: 32,
            seed,
            optimizer: OptimizerConfig::adam(1e-3),
            sgm_optimizer: OptimizerConfig::adam(3e-5),
            sgm_loss: SgmLoss::L2,
            sgm_update: Vec::new(),
        }
    }

    /// Feed-forward with SGD at `0.1`, momentum `0.5`. Online SGMs use Adam
    /// at `3e-5`: larger steps pull the meta-trained modules off the gradient
    /// within a few epochs.
    pub fn sgm(mode: FinetuneMode, k_layers: usize, sgm_init: SgmInit, seed: u64) -> Self {
        Self {
            mode,
            sgm_init,
            optimizer: OptimizerConfig::sgd(0.1, 0.5),
            ..Self::bp(k_layers, seed)
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.k_layers == 0 || self.k_layers > num_layers {
            return Err(Error::InvalidConfig(format!(
                "k_layers must lie in 1..={}, got {}",
                num_layers, self.k_layers
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch size must be at least 2".into()));
        }
        self.optimizer.validate()?;
        if self.mode == FinetuneMode::SgmOnline {
            self.sgm_optimizer.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f32,
    pub loss_q: f32,
    pub loss_angle: f32,
    pub det_acc: f32,
    /// NaN when the split has no positive sample.
    pub angle_mae_deg: f32,
    /// Peak activation bytes held by any training step of the epoch.
    pub peak_act_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    /// Epoch 0 is the state before training; one train and one val row per epoch.
    pub records: Vec<EpochRecord>,
    /// Online mode: mean SGM supervision loss per epoch.
    pub sgm_loss: Vec<f32>,
    /// Epoch in which a step produced a non-finite value. Training stops
    /// there and the weights go back to the end of the previous epoch, so
    /// the last records describe the last finite state.
    pub diverged_at: Option<usize>,
}

impl History {
    pub fn last(&self, split: Split) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: LossBreakdown,
    pub det_acc: f32,
    pub angle_mae_deg: f32,
}

/// Inputs of the first trainable layer for a fixed set of samples.
#[derive(Clone, Debug)]
pub struct Features {
    pub x: Tensor,
    pub labels: Vec<GraspLabel>,
}

impl Features {
    /// Runs the frozen layers `0..start` in eval mode over `samples`.
    pub fn compute(model: &Model, start: usize, samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("Features::compute"));
        }
        let item = Shape4::new(1, CHANNELS, CROP, CROP);
        let mut data = Vec::new();
        let mut shape = item;
        for chunk in samples.chunks(EVAL_CHUNK) {
            let x = Tensor::stack(chunk.iter().map(|s| s.image.as_slice()), item)?;
            let y = model.forward_range(0..start, &x)?;
            shape = y.shape();
            data.extend_from_slice(y.data());
        }
        Ok(Self {
            x: Tensor::new(shape.with_n(samples.len()), data)?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<GraspLabel>)> {
        let x = Tensor::stack(
            indices.iter().map(|&i| self.x.item_data(i)),
            self.x.shape().with_n(1),
        )?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Eval-mode metrics of layers `start..n` on cached features.
pub fn evaluate_features(model: &Model, start: usize, feats: &Features) -> Result<EvalMetrics> {
    let mut preds = Vec::with_capacity(feats.len());
    let idx: Vec<usize> = (0..feats.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = feats.batch(chunk)?;
        let head = model.forward_range(start..model.layers.len(), &x)?;
        preds.extend(predictions(&head)?);
    }
    Ok(EvalMetrics {
        loss: grasp_loss(&preds, &feats.labels)?,
        det_acc: detection_accuracy(&preds, &feats.labels, 0.5)?,
        angle_mae_deg: match angle_mae_deg(&preds, &feats.labels) {
            Ok(v) => v,
            Err(Error::NoPositives) => f32::NAN,
            Err(e) => return Err(e),
        },
    })
}

/// Eval-mode metrics of the whole model.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalMetrics> {
    let refs: Vec<&Sample> = samples.iter().collect();
    evaluate_features(model, 0, &Features::compute(model, 0, &refs)?)
}

fn record(epoch: usize, split: Split, m: &EvalMetrics, peak: usize) -> EpochRecord {
    EpochRecord {
        epoch,
        split,
        loss: m.loss.total,
        loss_q: m.loss.quality,
        loss_angle: m.loss.angle,
        det_acc: m.det_acc,
        angle_mae_deg: m.angle_mae_deg,
        peak_act_bytes: peak as u64,
    }
}

/// Bytes of the frozen-layer outputs `0..start` for a batch of `batch`,
/// which a capture-all forward would keep alive until the backward pass.
fn prefix_bytes(model: &Model, start: usize, batch: usize) -> Result<usize> {
    let shapes = model.config.layer_shapes(CROP, CROP)?;
    Ok(shapes[..start]
        .iter()
        .map(|&(c, h, w)| c * h * w * batch * 4)
        .sum())
}

/// Backprop fine-tuning of the trailing `cfg.k_layers` layers.
pub fn bp_finetune(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &FinetuneConfig,
) -> Result<History> {
    if cfg.mode != FinetuneMode::Bp {
        return Err(Error::InvalidConfig("bp_finetune requires mode bp".into()));
    }
    let train: Vec<&Sample> = train.iter().collect();
    let val: Vec<&Sample> = val.iter().collect();
    run(model, &mut Vec::new(), &train, &val, cfg)
}

/// Fine-tuning in any mode. SGM modes mark the SGMs static or trainable as
/// the mode requires and, for `SgmInit::Random`, replace them first.
pub fn finetune(
    model: &mut Model,
    sgms: &mut Vec<SgModule>,
    train: &[Sample],
    val: &[Sample],
    cfg: &FinetuneConfig,
) -> Result<History> {
    let train: Vec<&Sample> = train.iter().collect();
    let val: Vec<&Sample> = val.iter().collect();
    run(model, sgms, &train, &val, cfg)
}

/// [`finetune`] over borrowed samples, e.g. the union of several tasks.
pub fn finetune_refs(
    model: &mut Model,
    sgms: &mut Vec<SgModule>,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &FinetuneConfig,
) -> Result<History> {
    run(model, sgms, train, val, cfg)
}

/// Fresh modules with the shapes of `sgms` (the reference set when empty).
pub fn random_sgms(model: &Model, sgms: &[SgModule], seed: u64) -> Result<Vec<SgModule>> {
    let configs: Vec<SgmConfig> = if sgms.is_empty() {
        SgmConfig::reference_set(&model.config)
    } else {
        sgms.iter().map(|s| s.config).collect()
    };
    build_sgms(&configs, derive_seed(seed, TAG_RANDOM_SGM, 0))
}

fn run(
    model: &mut Model,
    sgms: &mut Vec<SgModule>,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &FinetuneConfig,
) -> Result<History> {
    let n = model.layers.len();
    cfg.validate(n)?;
    if train.len() < 2 {
        return Err(Error::EmptyInput("finetune training set"));
    }
    let start = n - cfg.k_layers;
    if cfg.mode != FinetuneMode::Bp {
        if cfg.sgm_init == SgmInit::Random {
            *sgms = random_sgms(model, sgms, cfg.seed)?;
        }
        for s in sgms.iter_mut() {
            s.is_static = cfg.mode == FinetuneMode::SgmStatic;
        }
        for i in start..n - 1 {
            if !sgms.iter().any(|s| s.config.attach_layer == i) {
                return Err(Error::MissingSgm(i));
            }
        }
    }

    let train_feats = Features::compute(model, start, train)?;
    let val_feats = if val.is_empty() {
        None
    } else {
        Some(Features::compute(model, start, val)?)
    };
    let mut opts = (start..n)
        .map(|_| Optimizer::new(cfg.optimizer))
        .collect::<Result<Vec<_>>>()?;
    let mut sgm_opts = match cfg.mode {
        FinetuneMode::SgmOnline => sgms
            .iter()
            .map(|_| Optimizer::new(cfg.sgm_optimizer))
            .collect::<Result<Vec<_>>>()?,
        _ => Vec::new(),
    };

    let mut history = History::default();
    let log = |history: &mut History, model: &Model, epoch: usize, peak: usize| -> Result<()> {
        let t = evaluate_features(model, start, &train_feats)?;
        let v = val_feats
            .as_ref()
            .map(|v| evaluate_features(model, start, v))
            .transpose()?;
        history.records.push(record(epoch, Split::Train, &t, peak));
        if let Some(v) = v {
            history.records.push(record(epoch, Split::Val, &v, peak));
        }
        Ok(())
    };
    log(&mut history, model, 0, 0)?;

    let mut order: Vec<usize> = (0..train_feats.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = stream(cfg.seed, TAG_SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        let mut peak = 0usize;
        let (mut sgm_sum, mut sgm_count) = (0.0f64, 0usize);
        let snapshot = (model.layers[start..].to_vec(), sgms.clone());
        let mut diverged = false;
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let (x, labels) = train_feats.batch(batch)?;
            let step = match cfg.mode {
                FinetuneMode::Bp => bp_step(
                    model,
                    &x,
                    &labels,
                    start,
                    &mut opts,
                    prefix_bytes(model, start, batch.len())?,
                ),
                FinetuneMode::SgmStatic => {
                    ff_finetune_step(model, sgms, &x, &labels, start, &mut opts, None, None)
                }
                FinetuneMode::SgmOnline => {
                    let online = OnlineSgm {
                        opts: &mut sgm_opts,
                        loss: cfg.sgm_loss,
                        update: &cfg.sgm_update,
                    };
                    ff_finetune_step(
                        model,
                        sgms,
                        &x,
                        &labels,
                        start,
                        &mut opts,
                        Some(online),
                        None,
                    )
                }
            };
            let report = match step {
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break;
                }
                r => r?,
            };
            peak = peak.max(report.peak_bytes);
            if let Some(v) = report.sgm_loss {
                sgm_sum += v as f64;
                sgm_count += 1;
            }
        }
        if !diverged {
            match log(&mut history, model, epoch, peak) {
                Err(Error::NonFinite(_)) => diverged = true,
                r => r?,
            }
        }
        if diverged {
            model.layers.truncate(start);
            model.layers.extend(snapshot.0);
            *sgms = snapshot.1;
            history.diverged_at = Some(epoch);
            break;
        }
        if cfg.mode == FinetuneMode::SgmOnline {
            history.sgm_loss.push(if sgm_count > 0 {
                (sgm_sum / sgm_count as f64) as f32
            } else {
                f32::NAN
            });
        }
    }
    Ok(history)
}
