//! CSV writers for histories, meta curves, summaries and accounting.

use std::path::Path;

use anyhow::{Context, Result};
use sgm_core::accounting::{AccountingReport, ModeComparison};
use sgm_core::taskgen::Split;
use sgm_core::trainer::{EpochRecord, History, MetaRecord};

pub const HISTORY_HEADER: [&str; 8] = [
    "epoch",
    "split",
    "loss",
    "loss_q",
    "loss_angle",
    "det_acc",
    "angle_mae_deg",
    "peak_act_bytes",
];

pub fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

pub fn history_row(r: &EpochRecord) -> Vec<String> {
    vec![
        r.epoch.to_string(),
        split_name(r.split).into(),
        r.loss.to_string(),
        r.loss_q.to_string(),
        r.loss_angle.to_string(),
        r.det_acc.to_string(),
        r.angle_mae_deg.to_string(),
        r.peak_act_bytes.to_string(),
    ]
}

pub fn write_history(path: &Path, h: &History) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(HISTORY_HEADER)?;
    for r in &h.records {
        w.write_record(history_row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_meta(path: &Path, curve: &[MetaRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iteration", "task", "model_loss", "sgm_loss"])?;
    for r in curve {
        w.write_record([
            r.iteration.to_string(),
            r.task.to_string(),
            r.model_loss.to_string(),
            r.sgm_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One line per fine-tuning run: final val metrics and divergence.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub task: String,
    pub mode: String,
    pub k: usize,
    pub sgm_init: String,
    pub det_acc: f32,
    pub angle_mae_deg: f32,
    pub peak_act_bytes: u64,
    pub diverged_at: Option<usize>,
}

pub fn write_summary(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "task",
        "mode",
        "k",
        "sgm_init",
        "det_acc",
        "angle_mae_deg",
        "peak_act_bytes",
        "diverged_at",
    ])?;
    for r in rows {
        w.write_record([
            r.task.clone(),
            r.mode.clone(),
            r.k.to_string(),
            r.sgm_init.clone(),
            r.det_acc.to_string(),
            r.angle_mae_deg.to_string(),
            r.peak_act_bytes.to_string(),
            r.diverged_at.map_or(String::new(), |e| e.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_accounting_csv(path: &Path, report: &AccountingReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "layer",
        "model_macs",
        "model_params",
        "activation_bytes",
        "trace_bytes",
        "sgm_macs",
        "sgm_params",
        "sgm_working_bytes",
    ])?;
    for r in &report.rows {
        let s = |f: fn(&sgm_core::accounting::SgmCost) -> u64| {
            r.sgm.as_ref().map_or(String::new(), |c| f(c).to_string())
        };
        w.write_record([
            r.layer.to_string(),
            r.model_macs.to_string(),
            r.model_params.to_string(),
            r.activation_bytes.to_string(),
            r.trace_bytes.to_string(),
            s(|c| c.macs),
            s(|c| c.params),
            s(|c| c.working_bytes),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn accounting_table(report: &AccountingReport, cmp: &ModeComparison) -> String {
    let mut s = format!(
        "batch {}  input {:?}\n{:>5} {:>12} {:>8} {:>12} {:>12} {:>8}\n",
        report.batch,
        report.input_shape,
        "layer",
        "MACs",
        "params",
        "act bytes",
        "SGM MACs",
        "SGM prm"
    );
    for r in &report.rows {
        let (m, p) = r.sgm.map_or((String::from("-"), String::from("-")), |c| {
            (c.macs.to_string(), c.params.to_string())
        });
        s += &format!(
            "{:>5} {:>12} {:>8} {:>12} {:>12} {:>8}\n",
            r.layer, r.model_macs, r.model_params, r.activation_bytes, m, p
        );
    }
    s += &format!(
        "\ntrailing k = {}\nsavings bytes        {}\nSGM overhead MACs    {}\ntrailing model MACs  {}\noverhead ratio       {:.6}\n\
         bp peak bytes        {}\nff peak bytes        {}\nbp stored bytes      {}\n",
        cmp.k,
        cmp.savings_bytes,
        cmp.overhead_macs,
        cmp.trailing_model_macs,
        cmp.overhead_ratio,
        cmp.bp_peak_bytes,
        cmp.ff_peak_bytes,
        cmp.bp_stored_bytes
    );
    s
}

pub fn write_comparison(path: &Path, cmp: &ModeComparison) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "k",
        "savings_bytes",
        "overhead_macs",
        "trailing_model_macs",
        "overhead_ratio",
        "bp_peak_bytes",
        "ff_peak_bytes",
        "bp_stored_bytes",
    ])?;
    w.write_record([
        cmp.k.to_string(),
        cmp.savings_bytes.to_string(),
        cmp.overhead_macs.to_string(),
        cmp.trailing_model_macs.to_string(),
        cmp.overhead_ratio.to_string(),
        cmp.bp_peak_bytes.to_string(),
        cmp.ff_peak_bytes.to_string(),
        cmp.bp_stored_bytes.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}
