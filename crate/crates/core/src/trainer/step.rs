//! Single training steps: the backprop reference pass and step, and the
//! feed-forward step driven by synthetic gradients.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::head::{grasp_loss_raw, GraspLabel, LossBreakdown};
use crate::model::{LayerTrace, Model};
use crate::ops::BnMode;
use crate::optim::Optimizer;
use crate::sgm::{SgModule, SgmLoss};
use crate::tensor::Tensor;

/// Byte counter for activation tensors held by a training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActivationLedger {
    live: usize,
    peak: usize,
}

impl ActivationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hold(&mut self, bytes: usize) {
        self.live += bytes;
        self.peak = self.peak.max(self.live);
    }

    pub fn release(&mut self, bytes: usize) {
        self.live = self
            .live
            .checked_sub(bytes)
            .expect("released more bytes than held");
    }

    /// Buffers that exist only inside one call, on top of what is live.
    pub fn transient(&mut self, bytes: usize) {
        self.peak = self.peak.max(self.live + bytes);
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Result of a backprop pass over the trainable layers `start..n` on frozen
/// weights, without touching any parameter or running statistic.
#[derive(Clone, Debug)]
pub struct ReferencePass {
    pub loss: LossBreakdown,
    /// True loss gradient with respect to the output of each trainable layer
    /// except the head, in layer order.
    pub act_grads: Vec<Tensor>,
    /// Parameter gradients of each trainable layer, in layer order.
    pub param_grads: Vec<Vec<Vec<f32>>>,
    pub traces: Vec<LayerTrace>,
    pub peak_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub peak_bytes: usize,
    /// Live activation bytes at the moment each trainable layer stepped.
    pub live_at_update: Vec<usize>,
    /// Mean pre-step supervision loss of the SGMs that were updated.
    pub sgm_loss: Option<f32>,
}

fn check_start(model: &Model, start: usize) -> Result<()> {
    if start >= model.layers.len() {
        return Err(Error::InvalidConfig(alloc::format!(
            "first trainable layer {} out of range for {} layers",
            start,
            model.layers.len()
        )));
    }
    Ok(())
}

fn check_opts(opts: &[Optimizer], count: usize) -> Result<()> {
    if opts.len() != count {
        return Err(shape_err(
            "training step",
            alloc::format!("{} optimizers for {} trainable layers", opts.len(), count),
        ));
    }
    Ok(())
}

/// Forward through `start..n` with batch statistics, then backward from the
/// loss. `x0` is the input of layer `start`; `prefix_bytes` is charged to
/// the ledger for frozen-layer outputs that a capture-all forward keeps.
pub fn reference_pass(
    model: &Model,
    x0: &Tensor,
    labels: &[GraspLabel],
    start: usize,
    prefix_bytes: usize,
) -> Result<ReferencePass> {
    check_start(model, start)?;
    let n = model.layers.len();
    let mut ledger = ActivationLedger::new();
    ledger.hold(prefix_bytes);
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(n - start);
    for i in start..n {
        let input = if i == start {
            x0
        } else {
            &traces[i - start - 1].output
        };
        let t = model.layers[i].forward(input, BnMode::Train)?;
        ledger.hold(t.retained_bytes());
        traces.push(t);
    }
    let (loss, mut g) = grasp_loss_raw(&traces[n - start - 1].output, labels)?;
    ledger.hold(g.nbytes());

    let mut act_grads = Vec::with_capacity(n - start - 1);
    let mut param_grads = Vec::with_capacity(n - start);
    for i in (start..n).rev() {
        let input = if i == start {
            x0
        } else {
            &traces[i - start - 1].output
        };
        let grads = model.layers[i].backward(input, &traces[i - start], &g, i > start)?;
        param_grads.push(grads.params);
        ledger.release(traces[i - start].retained_bytes());
        let Some(gin) = grads.input else { break };
        ledger.transient(g.nbytes() + gin.nbytes());
        ledger.release(g.nbytes());
        ledger.hold(gin.nbytes());
        act_grads.push(gin.clone());
        g = gin;
    }
    act_grads.reverse();
    param_grads.reverse();
    Ok(ReferencePass {
        loss,
        act_grads,
        param_grads,
        traces,
        peak_bytes: ledger.peak(),
    })
}

/// One backprop step on the trainable layers `start..n`.
pub fn bp_step(
    model: &mut Model,
    x0: &Tensor,
    labels: &[GraspLabel],
    start: usize,
    opts: &mut [Optimizer],
    prefix_bytes: usize,
) -> Result<StepReport> {
    let pass = reference_pass(model, x0, labels, start, prefix_bytes)?;
    check_opts(opts, model.layers.len() - start)?;
    for (j, (grads, trace)) in pass.param_grads.iter().zip(&pass.traces).enumerate() {
        let layer = &mut model.layers[start + j];
        opts[j].step(layer.params_mut(), grads)?;
        layer.commit_stats(trace);
    }
    Ok(StepReport {
        loss: pass.loss,
        peak_bytes: pass.peak_bytes,
        live_at_update: Vec::new(),
        sgm_loss: None,
    })
}

/// Online SGM training inside a feed-forward step.
pub struct OnlineSgm<'a> {
    /// One optimizer per entry of the `sgms` slice.
    pub opts: &'a mut [Optimizer],
    pub loss: SgmLoss,
    /// Per-layer update switch indexed by layer; missing entries update.
    pub update: &'a [bool],
}

fn sgm_index(sgms: &[SgModule], layer: usize) -> Result<usize> {
    sgms.iter()
        .position(|s| s.config.attach_layer == layer)
        .ok_or(Error::MissingSgm(layer))
}

/// One feed-forward step over the trainable layers `start..n`: each layer
/// runs forward, takes its synthetic gradient, updates, and hands its output
/// on; the head uses the true loss gradient.
///
/// With `online`, a reference backprop pass on the pre-step weights provides
/// the supervision targets and each SGM takes one step. With `oracle`, the
/// given activation gradients (one per trainable non-head layer) replace the
/// SGM outputs.
#[allow(clippy::too_many_arguments)]
pub fn ff_finetune_step(
    model: &mut Model,
    sgms: &mut [SgModule],
    x0: &Tensor,
    labels: &[GraspLabel],
    start: usize,
    opts: &mut [Optimizer],
    mut online: Option<OnlineSgm<'_>>,
    oracle: Option<&[Tensor]>,
) -> Result<StepReport> {
    check_start(model, start)?;
    let n = model.layers.len();
    check_opts(opts, n - start)?;
    let slots: Vec<Option<usize>> = match oracle {
        Some(o) => {
            if o.len() != n - start - 1 {
                return Err(shape_err(
                    "ff_finetune_step",
                    alloc::format!("{} oracle gradients for {} layers", o.len(), n - start - 1),
                ));
            }
            (start..n - 1).map(|_| None).collect()
        }
        None => (start..n - 1)
            .map(|i| sgm_index(sgms, i).map(Some))
            .collect::<Result<_>>()?,
    };
    if let Some(on) = &online {
        if on.opts.len() != sgms.len() {
            return Err(shape_err(
                "ff_finetune_step",
                alloc::format!("{} SGM optimizers for {} SGMs", on.opts.len(), sgms.len()),
            ));
        }
    }

    let reference = match online {
        Some(_) if oracle.is_none() => Some(reference_pass(model, x0, labels, start, 0)?),
        _ => None,
    };

    let mut ledger = ActivationLedger::new();
    let mut live_at_update = Vec::with_capacity(n - start);
    let (mut sgm_sum, mut sgm_count) = (0.0f64, 0usize);
    let mut owned: Option<Tensor> = None;
    ledger.hold(x0.nbytes());
    let mut loss = LossBreakdown::default();
    for i in start..n {
        let x = owned.as_ref().unwrap_or(x0);
        let trace = model.layers[i].forward(x, BnMode::Train)?;
        ledger.hold(trace.retained_bytes());
        let g = if i == n - 1 {
            let (l, g) = grasp_loss_raw(&trace.output, labels)?;
            loss = l;
            g
        } else if let Some(o) = oracle {
            o[i - start].clone()
        } else {
            let s = slots[i - start].expect("checked above");
            let (g, peak) = sgms[s].forward_measured(&trace.output, labels)?;
            ledger.transient(peak);
            if let (Some(on), Some(r)) = (online.as_mut(), &reference) {
                if on.update.get(i).copied().unwrap_or(true) {
                    let v = sgms[s].supervise_step(
                        &trace.output,
                        labels,
                        &r.act_grads[i - start],
                        on.loss,
                        &mut on.opts[s],
                    )?;
                    ledger.transient(peak);
                    sgm_sum += v as f64;
                    sgm_count += 1;
                }
            }
            g
        };
        g.expect_shape(trace.output.shape(), "ff_finetune_step")?;
        ledger.hold(g.nbytes());
        live_at_update.push(ledger.live());

        let layer = &mut model.layers[i];
        let grads = layer.backward(x, &trace, &g, false)?;
        opts[i - start].step(layer.params_mut(), &grads.params)?;
        layer.commit_stats(&trace);

        ledger.release(g.nbytes() + x.nbytes() + trace.conv_out.as_ref().map_or(0, Tensor::nbytes));
        owned = Some(trace.output);
    }
    ledger.release(owned.as_ref().map_or(0, Tensor::nbytes));

    let peak = reference
        .as_ref()
        .map_or(0, |r| r.peak_bytes)
        .max(ledger.peak());
    Ok(StepReport {
        loss,
        peak_bytes: peak,
        live_at_update,
        sgm_loss: (sgm_count > 0).then(|| (sgm_sum / sgm_count as f64) as f32),
    })
}
