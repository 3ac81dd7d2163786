//! The subcommands. Each writes its artifacts and the resolved `run.cfg`
//! into the output directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use sgm_core::accounting::{account_model, compare_modes, published_rows};
use sgm_core::rng::derive_seed;
use sgm_core::sgm::build_sgms_zero_output;
use sgm_core::taskgen::{generate_object, generate_task, Sample, Split, TaskDataset};
use sgm_core::trainer::{evaluate, finetune, finetune_refs, meta_pretrain, FinetuneMode, SgmInit};
use sgm_core::{build_model, ModelConfig, SgmConfig};

use crate::checkpoint;
use crate::config::{init_name, mode_name, RowSource, RunConfig};
use crate::plot;
use crate::report::{self, RunSummary};
use crate::taskpack::{self, Manifest, PackEntry, GENERATOR_VERSION};

const TAG_OBJECT: u64 = 0x4f42_4a45_4354;
const TAG_TASK: u64 = 0x5441_534b;
const TAG_SGM: u64 = 0x0053_474d;

/// Usage errors exit with 1, runtime failures with 2.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(e) => write!(f, "usage: {e:#}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<sgm_core::Error> for Failure {
    fn from(e: sgm_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow!(msg))
}

fn prepare(out: &Path, cfg: &RunConfig) -> CmdResult {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write(out)?;
    Ok(())
}

/// The packs `gen-tasks` writes for `cfg`: object and task seeds per index.
pub fn plan_tasks(cfg: &RunConfig) -> Vec<PackEntry> {
    (0..cfg.tasks.objects)
        .map(|i| PackEntry {
            file: format!("task_{i:03}.sgmtask"),
            object_seed: derive_seed(cfg.seed, TAG_OBJECT, i as u64),
            task_seed: derive_seed(cfg.seed, TAG_TASK, i as u64),
            train: cfg.tasks.train,
            val: cfg.tasks.val,
        })
        .collect()
}

pub fn gen_tasks(cfg: &RunConfig, out: &Path) -> CmdResult<Manifest> {
    prepare(out, cfg)?;
    let entries = plan_tasks(cfg);
    entries.par_iter().try_for_each(|e| -> anyhow::Result<()> {
        let task = generate_task(
            &generate_object(e.object_seed),
            (e.train, e.val),
            e.task_seed,
        )?;
        taskpack::write_pack(&out.join(&e.file), &task)
    })?;
    let manifest = Manifest {
        generator: GENERATOR_VERSION,
        seed: cfg.seed,
        tasks: entries,
    };
    std::fs::write(out.join(taskpack::MANIFEST), manifest.to_text())?;
    Ok(manifest)
}

fn load_tasks(dir: &Path, entries: &[PackEntry]) -> CmdResult<Vec<TaskDataset>> {
    Ok(entries
        .par_iter()
        .map(|e| taskpack::load_task(dir, e))
        .collect::<anyhow::Result<Vec<_>>>()?)
}

pub fn pretrain(cfg: &RunConfig, tasks_dir: &Path, init: Option<&Path>, out: &Path) -> CmdResult {
    let manifest = Manifest::load(tasks_dir).map_err(Failure::Usage)?;
    if let Some(x) = cfg.pretrain.exclude {
        if x >= manifest.tasks.len() {
            return Err(usage(format!(
                "exclude {x} but the manifest lists {} tasks",
                manifest.tasks.len()
            )));
        }
    }
    let chosen: Vec<PackEntry> = manifest
        .tasks
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != cfg.pretrain.exclude)
        .map(|(_, e)| e.clone())
        .collect();
    if chosen.len() < 2 {
        return Err(usage(format!(
            "pretraining needs at least 2 tasks, got {}",
            chosen.len()
        )));
    }
    let meta = cfg.meta_config();
    meta.validate(ModelConfig::reference().num_layers())
        .map_err(|e| Failure::Usage(e.into()))?;
    prepare(out, cfg)?;
    let tasks = load_tasks(tasks_dir, &chosen)?;

    let (mut model, mut sgms) = match init {
        Some(p) => checkpoint::load(p)?,
        None => (build_model(ModelConfig::reference(), cfg.seed)?, Vec::new()),
    };
    if cfg.pretrain.bp_epochs > 0 {
        let train: Vec<&Sample> = tasks.iter().flat_map(|t| t.train.iter()).collect();
        let val: Vec<&Sample> = tasks.iter().flat_map(|t| t.val.iter()).collect();
        eprintln!("backprop pretraining on {} samples", train.len());
        let h = finetune_refs(
            &mut model,
            &mut Vec::new(),
            &train,
            &val,
            &cfg.bp_pretrain_config(),
        )?;
        report::write_history(&out.join("bp.csv"), &h)?;
        if let Some(e) = h.diverged_at {
            return Err(Failure::Runtime(anyhow!(
                "backprop pretraining diverged in epoch {e}"
            )));
        }
    }
    if sgms.is_empty() {
        sgms = initial_sgms(cfg, &model)?;
    }
    if cfg.pretrain.meta_iterations > 0 {
        eprintln!("meta-pretraining for {} iterations", meta.meta_iterations);
        let sets: Vec<&[Sample]> = tasks.iter().map(|t| t.train.as_slice()).collect();
        let curve = meta_pretrain(&mut model, &mut sgms, &sets, &meta)?;
        report::write_meta(&out.join("meta.csv"), &curve)?;
    }
    checkpoint::save(&out.join("pretrained.ckpt"), &model, &sgms)?;
    Ok(())
}

/// Zero-output SGMs, the starting point of meta-pretraining.
pub fn initial_sgms(
    cfg: &RunConfig,
    model: &sgm_core::Model,
) -> sgm_core::Result<Vec<sgm_core::SgModule>> {
    build_sgms_zero_output(
        &SgmConfig::reference_set(&model.config),
        derive_seed(cfg.seed, TAG_SGM, 0),
    )
}

fn task_label(dir: &Path, e: &PackEntry) -> String {
    let stem = Path::new(&e.file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let parent = dir.file_name().map(|s| s.to_string_lossy().into_owned());
    match parent {
        Some(p) if !p.is_empty() => format!("{p}/{stem}"),
        _ => stem,
    }
}

pub fn finetune_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    task_args: &[String],
    out: &Path,
) -> CmdResult<Vec<RunSummary>> {
    if task_args.is_empty() {
        return Err(usage("finetune needs at least one --task".into()));
    }
    let (model, sgms) = checkpoint::load(ckpt)?;
    let grid_inits: Vec<SgmInit> = if cfg.finetune.mode == FinetuneMode::Bp {
        vec![SgmInit::Trained]
    } else {
        cfg.finetune.sgm_init.clone()
    };
    for &init in &grid_inits {
        cfg.finetune_config(init)
            .validate(model.layers.len())
            .map_err(|e| Failure::Usage(e.into()))?;
    }
    if cfg.finetune.mode != FinetuneMode::Bp {
        checkpoint::require_sgms(&model, &sgms, cfg.finetune.k)?;
    }
    let resolved = task_args
        .iter()
        .map(|a| taskpack::resolve(a))
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(Failure::Usage)?;
    prepare(out, cfg)?;
    let tasks: Vec<(String, TaskDataset)> = resolved
        .par_iter()
        .map(|(dir, e)| Ok((task_label(dir, e), taskpack::load_task(dir, e)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let grid: Vec<(usize, SgmInit)> = (0..tasks.len())
        .flat_map(|t| grid_inits.iter().map(move |&i| (t, i)))
        .collect();
    let summaries = grid
        .par_iter()
        .map(|&(t, init)| -> anyhow::Result<RunSummary> {
            let (label, task) = &tasks[t];
            let run_name = format!(
                "{}-{}-k{}-{}",
                label.replace('/', "_"),
                mode_name(cfg.finetune.mode),
                cfg.finetune.k,
                init_name(init)
            );
            let dir = out.join(&run_name);
            std::fs::create_dir_all(&dir)?;
            let mut m = model.clone();
            let mut s = sgms.clone();
            let h = finetune(
                &mut m,
                &mut s,
                &task.train,
                &task.val,
                &cfg.finetune_config(init),
            )?;
            report::write_history(&dir.join("history.csv"), &h)?;
            checkpoint::save(&dir.join("final.ckpt"), &m, &s)?;
            let last = h
                .last(Split::Val)
                .ok_or_else(|| anyhow!("{run_name}: no validation records"))?;
            let peak = h
                .records
                .iter()
                .map(|r| r.peak_act_bytes)
                .max()
                .unwrap_or(0);
            Ok(RunSummary {
                task: label.clone(),
                mode: mode_name(cfg.finetune.mode).into(),
                k: cfg.finetune.k,
                sgm_init: init_name(init).into(),
                det_acc: last.det_acc,
                angle_mae_deg: last.angle_mae_deg,
                peak_act_bytes: peak,
                diverged_at: h.diverged_at,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    report::write_summary(&out.join("summary.csv"), &summaries)?;
    Ok(summaries)
}

pub fn eval_cmd(cfg: &RunConfig, ckpt: &Path, task_args: &[String], out: &Path) -> CmdResult {
    if task_args.is_empty() {
        return Err(usage("eval needs at least one --task".into()));
    }
    let (model, _) = checkpoint::load(ckpt)?;
    let resolved = task_args
        .iter()
        .map(|a| taskpack::resolve(a))
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(Failure::Usage)?;
    prepare(out, cfg)?;
    let rows = resolved
        .par_iter()
        .map(|(dir, e)| -> anyhow::Result<Vec<Vec<String>>> {
            let task = taskpack::load_task(dir, e)?;
            let label = task_label(dir, e);
            [Split::Train, Split::Val]
                .into_iter()
                .map(|sp| {
                    let m = evaluate(&model, task.split(sp))?;
                    Ok(vec![
                        label.clone(),
                        report::split_name(sp).into(),
                        m.loss.total.to_string(),
                        m.loss.quality.to_string(),
                        m.loss.angle.to_string(),
                        m.det_acc.to_string(),
                        m.angle_mae_deg.to_string(),
                    ])
                })
                .collect()
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let path = out.join("eval.csv");
    let mut w =
        csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record([
        "task",
        "split",
        "loss",
        "loss_q",
        "loss_angle",
        "det_acc",
        "angle_mae_deg",
    ])
    .context("writing eval.csv")?;
    for r in rows.into_iter().flatten() {
        w.write_record(&r).context("writing eval.csv")?;
    }
    w.flush()?;
    Ok(())
}

pub fn account_cmd(cfg: &RunConfig, out: &Path) -> CmdResult<String> {
    let a = &cfg.account;
    let report = match a.rows {
        RowSource::Paper => published_rows(),
        RowSource::Reference => {
            let mc = ModelConfig::reference();
            account_model(&mc, &SgmConfig::reference_set(&mc), (3, 128, 128), a.batch)
                .map_err(|e| Failure::Usage(e.into()))?
        }
    };
    let cmp = compare_modes(&report, a.k).map_err(|e| Failure::Usage(e.into()))?;
    prepare(out, cfg)?;
    report::write_accounting_csv(&out.join("accounting.csv"), &report)?;
    report::write_comparison(&out.join("comparison.csv"), &cmp)?;
    let table = report::accounting_table(&report, &cmp);
    std::fs::write(out.join("accounting.txt"), &table)?;
    Ok(table)
}

pub fn plot_cmd(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> CmdResult {
    if inputs.is_empty() {
        return Err(usage("plot needs at least one CSV".into()));
    }
    prepare(out, cfg)?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    for m in plot::plot_files(&refs, out)? {
        eprintln!("warning: no data for {m}, chart omitted");
    }
    Ok(())
}
