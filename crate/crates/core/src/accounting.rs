//! Resource accounting: per-layer multiply-accumulates, parameters and
//! activation bytes for the model and its SGMs, and the memory/compute
//! trade-off of feed-forward fine-tuning versus backpropagation.
//!
//! MACs count multiplier-accumulator operations only; bias and batch-norm
//! additions are reported separately in `bias_adds`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sgm::SgmConfig;

pub const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SgmCost {
    pub macs: u64,
    pub params: u64,
    /// Transient bytes of one evaluation: augmented input, hidden map, output.
    pub working_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccountingRow {
    /// One-based layer number.
    pub layer: usize,
    pub model_macs: u64,
    pub model_params: u64,
    pub bias_adds: u64,
    /// Bytes of the layer input (the previous layer's output).
    pub input_bytes: u64,
    pub activation_elements: u64,
    pub activation_bytes: u64,
    /// Bytes a trainable block keeps for its own backward pass: the output
    /// plus the pre-normalization copy for batch-normed blocks.
    pub trace_bytes: u64,
    pub sgm: Option<SgmCost>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccountingReport {
    pub rows: Vec<AccountingRow>,
    pub batch: usize,
    /// `(C, H, W)` of one input.
    pub input_shape: (usize, usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeComparison {
    pub k: usize,
    /// Activation bytes of the trailing `k` layers that backprop would keep.
    pub savings_bytes: u64,
    pub overhead_macs: u64,
    pub trailing_model_macs: u64,
    pub overhead_ratio: f64,
    /// Backprop with every layer output retained, plus the pre-normalization
    /// copies kept by the trainable blocks.
    pub bp_peak_bytes: u64,
    /// Largest per-layer working set of the feed-forward sweep over the
    /// trainable layers.
    pub ff_peak_bytes: u64,
    pub bp_stored_bytes: u64,
}

/// MACs, parameters and activation sizes of `config` (and its SGMs) for
/// `batch` inputs of shape `input`.
pub fn account_model(
    config: &ModelConfig,
    sgms: &[SgmConfig],
    input: (usize, usize, usize),
    batch: usize,
) -> Result<AccountingReport> {
    config.validate()?;
    if input.0 != config.input_channels {
        return Err(Error::InvalidConfig(format!(
            "input has {} channels, model expects {}",
            input.0, config.input_channels
        )));
    }
    if batch == 0 {
        return Err(Error::InvalidConfig("batch must be positive".into()));
    }
    let b = batch as u64;
    let shapes = config.layer_shapes(input.1, input.2)?;
    let mut in_elems = (input.0 * input.1 * input.2) as u64;
    let mut rows = Vec::with_capacity(shapes.len());
    for (i, (spec, &(c, h, w))) in config.layers.iter().zip(&shapes).enumerate() {
        let plane = (h * w) as u64;
        let per_out = (spec.kernel * spec.kernel * spec.in_channels) as u64;
        let act = c as u64 * plane;
        let sgm = match sgms.iter().find(|s| s.attach_layer == i) {
            Some(s) => {
                if s.channels != c {
                    return Err(Error::InvalidConfig(format!(
                        "SGM on layer {} expects {} channels, layer has {}",
                        i + 1,
                        s.channels,
                        c
                    )));
                }
                let k2 = (s.kernel * s.kernel) as u64;
                let macs = plane
                    * (s.hidden as u64 * k2 * s.input_channels() as u64
                        + s.channels as u64 * k2 * s.hidden as u64);
                Some(SgmCost {
                    macs: macs * b,
                    params: s.param_count(true) as u64,
                    working_bytes: (s.input_channels() + s.hidden + s.channels) as u64
                        * plane
                        * b
                        * BYTES_PER_ELEMENT,
                })
            }
            None => None,
        };
        let act_bytes = act * b * BYTES_PER_ELEMENT;
        rows.push(AccountingRow {
            layer: i + 1,
            model_macs: act * per_out * b,
            model_params: spec.param_count() as u64,
            bias_adds: act * b * if spec.has_bn { 2 } else { 1 },
            input_bytes: in_elems * b * BYTES_PER_ELEMENT,
            activation_elements: act * b,
            activation_bytes: act_bytes,
            trace_bytes: act_bytes * if spec.has_bn { 2 } else { 1 },
            sgm,
        });
        in_elems = act;
    }
    Ok(AccountingReport {
        rows,
        batch,
        input_shape: input,
    })
}

/// Memory savings and SGM compute overhead when the trailing `k` layers are
/// fine-tuned feed-forward instead of with backprop.
pub fn compare_modes(report: &AccountingReport, k: usize) -> Result<ModeComparison> {
    let n = report.rows.len();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!(
            "k must lie in 1..={}, got {}",
            n, k
        )));
    }
    let trailing = &report.rows[n - k..];
    let savings_bytes = trailing.iter().map(|r| r.activation_bytes).sum();
    let overhead_macs = trailing.iter().filter_map(|r| r.sgm.map(|s| s.macs)).sum();
    let trailing_model_macs: u64 = trailing.iter().map(|r| r.model_macs).sum();
    let bp_stored_bytes: u64 = report.rows.iter().map(|r| r.activation_bytes).sum();
    let bp_peak_bytes = bp_stored_bytes
        + trailing
            .iter()
            .map(|r| r.trace_bytes - r.activation_bytes)
            .sum::<u64>();
    let ff_peak_bytes = trailing
        .iter()
        .map(|r| {
            // the head receives its gradient straight from the loss
            let grad = r.sgm.map_or(r.activation_bytes, |s| s.working_bytes);
            r.input_bytes + r.trace_bytes + grad
        })
        .max()
        .unwrap_or(0);
    Ok(ModeComparison {
        k,
        savings_bytes,
        overhead_macs,
        trailing_model_macs,
        overhead_ratio: if trailing_model_macs == 0 {
            0.0
        } else {
            overhead_macs as f64 / trailing_model_macs as f64
        },
        bp_peak_bytes,
        ff_peak_bytes,
        bp_stored_bytes,
    })
}

/// The published resource table of the original grasp network, activation
/// column read as bytes at batch 1. Only aggregates over these rows are
/// meaningful; the rows do not correspond to [`ModelConfig::reference`].
pub fn published_rows() -> AccountingReport {
    const TABLE: [(u64, u64, u64, Option<(u64, u64)>); 6] = [
        (153_600_000, 624, 1_968_128, Some((340_480_000, 1400))),
        (87_680_000, 1620, 430_592, Some((74_880_000, 1400))),
        (35_130_240, 3250, 173_056, Some((55_206_400, 5100))),
        (10_318_080, 6450, 77_824, Some((39_936, 624))),
        (19_456, 304, 3072, Some((39_936, 624))),
        (3_264, 51, 192, None),
    ];
    let mut prev = 0;
    let rows = TABLE
        .iter()
        .enumerate()
        .map(|(i, &(macs, params, act, sgm))| {
            let row = AccountingRow {
                layer: i + 1,
                model_macs: macs,
                model_params: params,
                bias_adds: 0,
                input_bytes: prev,
                activation_elements: act / BYTES_PER_ELEMENT,
                activation_bytes: act,
                trace_bytes: act,
                sgm: sgm.map(|(macs, params)| SgmCost {
                    macs,
                    params,
                    working_bytes: 0,
                }),
            };
            prev = act;
            row
        })
        .collect();
    AccountingReport {
        rows,
        batch: 1,
        input_shape: (3, 128, 128),
    }
}
