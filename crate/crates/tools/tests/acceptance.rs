//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! Runs at reduced desk scale: 5 pool objects for pretraining, 3 held-out
//! objects, 200 training and 200 validation crops per object. The held-out
//! objects never enter pretraining, so one pretrained state serves every
//! held-out object exactly as a leave-one-out run would. Expect roughly half
//! an hour on one core. Set `SGM_ACCEPTANCE_STRICT` to exit non-zero when a
//! criterion fails.

#[path = "../../core/tests/support/fd.rs"]
mod fd;

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use sgm_core::accounting::{account_model, compare_modes, published_rows};
use sgm_core::model::Model;
use sgm_core::optim::{Optimizer, OptimizerConfig};
use sgm_core::rng::stream;
use sgm_core::sgm::build_sgms;
use sgm_core::taskgen::{generate_object, generate_task, Sample, Split, TaskDataset};
use sgm_core::trainer::{
    bp_step, ff_finetune_step, finetune, finetune_refs, meta_pretrain, reference_pass,
    FinetuneMode, History, SgmInit,
};
use sgm_core::{build_model, GraspLabel, ModelConfig, SgModule, SgmConfig, Shape4, Tensor};
use sgm_tools::commands::{initial_sgms, plan_tasks};
use sgm_tools::config::RunConfig;

const POOL: usize = 5;
const HELD: usize = 3;
const TRAIN: usize = 200;
const VAL: usize = 200;
const FT_EPOCHS: usize = 50;
const BATCH: usize = 32;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(n: usize, name: &str, o: &Outcome, secs: f64) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {n:>2} {}: {name} [{secs:.0}s] {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    let _ = out.flush();
}

fn note(msg: &str) {
    eprintln!("  .. {msg}");
}

// 1 ------------------------------------------------------------------------

fn gradient_oracles() -> Outcome {
    let checks = fd::all_checks();
    let worst64 = checks.iter().map(|(_, c)| c.err_f64).fold(0.0, f64::max);
    let worst32 = checks.iter().map(|(_, c)| c.err_f32).fold(0.0, f64::max);
    let failed: Vec<String> = checks
        .iter()
        .filter(|(_, c)| !c.passes())
        .map(|(s, c)| format!("{} seed {s}", c.what))
        .collect();
    outcome(
        failed.is_empty(),
        format!(
            "{} comparisons over {} seeds; worst rel err f64 {worst64:.1e} (< {:.0e}), f32 {worst32:.1e} (< {:.0e}){}",
            checks.len(),
            fd::SEEDS,
            fd::TOL_F64,
            fd::TOL_F32,
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn random_batch(model: &Model, start: usize, seed: u64) -> (Tensor, Vec<GraspLabel>) {
    let mut rng = stream(seed, 0x6163_6332, 0);
    let s = model.config.layer_shapes(128, 128).unwrap()[start - 1];
    let x = Tensor::from_fn(Shape4::new(8, s.0, s.1, s.2), |_, _, _, _| {
        rng.gen_range(0.0f32..1.5)
    });
    let labels = (0..8)
        .map(|i| GraspLabel::new(i % 2 == 0, rng.gen_range(-1.5f32..1.5)).unwrap())
        .collect();
    (x, labels)
}

fn max_param_diff(a: &Model, b: &Model) -> f32 {
    let mut d = 0.0f32;
    for (x, y) in a.layers.iter().zip(&b.layers) {
        for (p, q) in x.state().into_iter().zip(y.state()) {
            for (u, v) in p.iter().zip(q) {
                d = d.max((u - v).abs());
            }
        }
    }
    d
}

fn oracle_injection() -> Outcome {
    let mut worst = 0.0f32;
    for k in 1..=3 {
        for cfg in [OptimizerConfig::sgd(0.1, 0.9), OptimizerConfig::adam(1e-3)] {
            let base = build_model(ModelConfig::reference(), 21).unwrap();
            let start = base.layers.len() - k;
            let (mut bp, mut ff) = (base.clone(), base);
            let mk = || {
                (0..k)
                    .map(|_| Optimizer::new(cfg).unwrap())
                    .collect::<Vec<_>>()
            };
            let (mut ob, mut of) = (mk(), mk());
            for step in 0..10 {
                let (x, labels) = random_batch(&bp, start, step);
                let oracle = reference_pass(&ff, &x, &labels, start, 0)
                    .unwrap()
                    .act_grads;
                bp_step(&mut bp, &x, &labels, start, &mut ob, 0).unwrap();
                ff_finetune_step(
                    &mut ff,
                    &mut [],
                    &x,
                    &labels,
                    start,
                    &mut of,
                    None,
                    Some(&oracle),
                )
                .unwrap();
                worst = worst.max(max_param_diff(&bp, &ff));
            }
        }
    }
    outcome(
        worst <= 1e-6,
        format!("k 1..3 x {{sgd, adam}} x 10 steps: max |param diff| {worst:.1e} (<= 1e-6)"),
    )
}

// 3, 4 ---------------------------------------------------------------------

fn table_arithmetic() -> Outcome {
    let c = compare_modes(&published_rows(), 3).unwrap();
    let pass = c.savings_bytes == 81_088
        && c.overhead_macs == 79_872
        && c.trailing_model_macs == 10_340_800
        && c.overhead_ratio < 0.01;
    outcome(
        pass,
        format!(
            "savings {} B, overhead {} MACs, trailing MACs {}, ratio {:.4}",
            c.savings_bytes, c.overhead_macs, c.trailing_model_macs, c.overhead_ratio
        ),
    )
}

fn parameter_anchors() -> Outcome {
    let model = build_model(ModelConfig::reference(), 0).unwrap();
    let layers = model.layer_param_counts();
    let sgms = build_sgms(&SgmConfig::reference_set(&model.config), 0).unwrap();
    let s: Vec<usize> = sgms.iter().map(SgModule::param_count).collect();
    let pass = layers[0] == 624
        && layers[5] == 51
        && s[0] == 1400
        && s[1] == 1400
        && s[3] == 624
        && s[4] == 624;
    outcome(pass, format!("layers {layers:?}, SGMs {s:?}"))
}

// 5-9 ----------------------------------------------------------------------

fn settings() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 2024;
    cfg.tasks.objects = POOL + HELD;
    cfg.tasks.train = TRAIN;
    cfg.tasks.val = VAL;
    cfg.finetune.epochs = FT_EPOCHS;
    cfg.finetune.batch = BATCH;
    cfg.pretrain.batch = BATCH;
    cfg
}

struct Run {
    history: History,
}

impl Run {
    fn val(&self) -> (f32, f32) {
        let v = self.history.last(Split::Val).unwrap();
        (v.det_acc, v.angle_mae_deg)
    }

    fn peak(&self) -> u64 {
        self.history
            .records
            .iter()
            .map(|r| r.peak_act_bytes)
            .max()
            .unwrap_or(0)
    }
}

struct Lab {
    /// `bp[k-1][object]`
    bp: Vec<Vec<Run>>,
    static_trained: Vec<Run>,
    static_random: Vec<Run>,
    online_trained: Vec<Run>,
    online_random: Vec<Run>,
}

fn fine_tune(
    cfg: &RunConfig,
    model: &Model,
    sgms: &[SgModule],
    task: &TaskDataset,
    mode: FinetuneMode,
    k: usize,
    init: SgmInit,
) -> Run {
    let mut c = cfg.clone();
    c.finetune.mode = mode;
    c.finetune.k = k;
    let (mut m, mut s) = (model.clone(), sgms.to_vec());
    let history = finetune(
        &mut m,
        &mut s,
        &task.train,
        &task.val,
        &c.finetune_config(init),
    )
    .unwrap();
    Run { history }
}

fn build_lab() -> Lab {
    let cfg = settings();
    let t = Instant::now();
    let tasks: Vec<TaskDataset> = plan_tasks(&cfg)
        .par_iter()
        .map(|e| {
            generate_task(
                &generate_object(e.object_seed),
                (e.train, e.val),
                e.task_seed,
            )
            .unwrap()
        })
        .collect();
    let (pool, held) = tasks.split_at(POOL);
    note(&format!(
        "generated {} tasks in {:.0}s",
        tasks.len(),
        t.elapsed().as_secs_f64()
    ));

    let t = Instant::now();
    let mut model = build_model(ModelConfig::reference(), cfg.seed).unwrap();
    let train: Vec<&Sample> = pool.iter().flat_map(|t| t.train.iter()).collect();
    let val: Vec<&Sample> = pool.iter().flat_map(|t| t.val.iter()).collect();
    let h = finetune_refs(
        &mut model,
        &mut Vec::new(),
        &train,
        &val,
        &cfg.bp_pretrain_config(),
    )
    .unwrap();
    let v = h.last(Split::Val).unwrap();
    note(&format!(
        "backprop pretraining: pool val det {:.3} mae {:.2} in {:.0}s",
        v.det_acc,
        v.angle_mae_deg,
        t.elapsed().as_secs_f64()
    ));

    let t = Instant::now();
    let mut sgms = initial_sgms(&cfg, &model).unwrap();
    let sets: Vec<&[Sample]> = pool.iter().map(|t| t.train.as_slice()).collect();
    let curve = meta_pretrain(&mut model, &mut sgms, &sets, &cfg.meta_config()).unwrap();
    let w = curve.len() / 10;
    let mean = |r: &[sgm_core::trainer::MetaRecord]| {
        r.iter().map(|c| c.sgm_loss).sum::<f32>() / r.len() as f32
    };
    note(&format!(
        "meta-pretraining: sgm loss first tenth {:.2e}, last tenth {:.2e} in {:.0}s",
        mean(&curve[..w]),
        mean(&curve[curve.len() - w..]),
        t.elapsed().as_secs_f64()
    ));

    let t = Instant::now();
    #[derive(Clone, Copy)]
    enum Job {
        Bp(usize),
        Sgm(FinetuneMode, SgmInit),
    }
    let mut jobs = vec![Job::Bp(1), Job::Bp(2), Job::Bp(3)];
    for mode in [FinetuneMode::SgmStatic, FinetuneMode::SgmOnline] {
        for init in [SgmInit::Trained, SgmInit::Random] {
            jobs.push(Job::Sgm(mode, init));
        }
    }
    let grid: Vec<(usize, usize)> = (0..jobs.len())
        .flat_map(|j| (0..held.len()).map(move |o| (j, o)))
        .collect();
    let mut runs: Vec<Option<Run>> = grid
        .par_iter()
        .map(|&(j, o)| {
            Some(match jobs[j] {
                Job::Bp(k) => fine_tune(
                    &cfg,
                    &model,
                    &sgms,
                    &held[o],
                    FinetuneMode::Bp,
                    k,
                    SgmInit::Trained,
                ),
                Job::Sgm(mode, init) => fine_tune(&cfg, &model, &sgms, &held[o], mode, 3, init),
            })
        })
        .collect();
    note(&format!(
        "{} fine-tuning runs in {:.0}s",
        grid.len(),
        t.elapsed().as_secs_f64()
    ));
    let mut take = |j: usize| -> Vec<Run> {
        (0..held.len())
            .map(|o| runs[j * held.len() + o].take().unwrap())
            .collect()
    };
    let bp = vec![take(0), take(1), take(2)];
    let (static_trained, static_random, online_trained, online_random) =
        (take(3), take(4), take(5), take(6));
    Lab {
        bp,
        static_trained,
        static_random,
        online_trained,
        online_random,
    }
}

fn mean(v: impl Iterator<Item = f32>) -> f32 {
    let v: Vec<f32> = v.collect();
    v.iter().sum::<f32>() / v.len() as f32
}

fn fmt_runs(runs: &[Run]) -> String {
    runs.iter()
        .map(|r| {
            let (d, m) = r.val();
            match r.history.diverged_at {
                Some(e) => format!("{d:.2}/{m:.1}° (diverged e{e})"),
                None => format!("{d:.2}/{m:.1}°"),
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn bp_baseline(lab: &Lab) -> Outcome {
    let k3 = &lab.bp[2];
    let thresholds = k3.iter().all(|r| {
        let (d, m) = r.val();
        d >= 0.95 && m <= 15.0
    });
    // the ordering is checked on the averages over objects, like the table it mirrors
    let det: Vec<f32> = lab
        .bp
        .iter()
        .map(|runs| mean(runs.iter().map(|r| r.val().0)))
        .collect();
    let mae: Vec<f32> = lab
        .bp
        .iter()
        .map(|runs| mean(runs.iter().map(|r| r.val().1)))
        .collect();
    let ordered = det[2] >= det[1] && det[1] >= det[0] && mae[2] <= mae[1] && mae[1] <= mae[0];
    outcome(
        thresholds && ordered,
        format!(
            "k=3 det/mae per object [{}]; mean det k1..3 {:.3} {:.3} {:.3}, mean mae {:.2} {:.2} {:.2}",
            fmt_runs(k3),
            det[0],
            det[1],
            det[2],
            mae[0],
            mae[1],
            mae[2]
        ),
    )
}

fn static_sgm(lab: &Lab) -> Outcome {
    let mut pass = true;
    for (s, b) in lab.static_trained.iter().zip(&lab.bp[2]) {
        let ((sd, sm), (bd, bm)) = (s.val(), b.val());
        pass &= sd >= bd - 0.05 && sm <= 30.0 && bm <= sm && s.history.diverged_at.is_none();
    }
    outcome(
        pass,
        format!(
            "static trained [{}] vs bp k=3 [{}]",
            fmt_runs(&lab.static_trained),
            fmt_runs(&lab.bp[2])
        ),
    )
}

fn random_static(lab: &Lab) -> Outcome {
    let pass = lab.static_random.iter().all(|r| r.val().1 >= 40.0);
    outcome(
        pass,
        format!(
            "static random [{}], mae >= 40 required",
            fmt_runs(&lab.static_random)
        ),
    )
}

fn online_ablation(lab: &Lab) -> Outcome {
    let mae = |runs: &[Run]| mean(runs.iter().map(|r| r.val().1));
    let (on, onr, st) = (
        mae(&lab.online_trained),
        mae(&lab.online_random),
        mae(&lab.static_trained),
    );
    let pass = on <= st && (onr - on).abs() <= 5.0;
    outcome(
        pass,
        format!(
            "mean mae online trained {on:.2}, online random {onr:.2}, static {st:.2}; online trained [{}], online random [{}]",
            fmt_runs(&lab.online_trained),
            fmt_runs(&lab.online_random)
        ),
    )
}

fn memory(lab: &Lab) -> Outcome {
    let mc = ModelConfig::reference();
    let predicted = compare_modes(
        &account_model(&mc, &SgmConfig::reference_set(&mc), (3, 128, 128), BATCH).unwrap(),
        3,
    )
    .unwrap()
    .ff_peak_bytes;
    let mut pass = true;
    let mut parts = Vec::new();
    for (s, b) in lab.static_trained.iter().zip(&lab.bp[2]) {
        let (ff, bp) = (s.peak(), b.peak());
        let ratio = ff as f64 / bp as f64;
        pass &= ff > 0 && ff <= predicted && ratio <= 0.40;
        parts.push(format!("ff {ff} B / bp {bp} B = {:.1}%", 100.0 * ratio));
    }
    outcome(
        pass,
        format!(
            "batch {BATCH}, k=3, predicted ff peak {predicted} B; {} (<= 40%)",
            parts.join("; ")
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn sgm(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_sgm"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn same_files(a: &Path, b: &Path, rel: &str) -> bool {
    match (std::fs::read(a.join(rel)), std::fs::read(b.join(rel))) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let cfg_path = d.join("run.cfg");
    std::fs::write(
        &cfg_path,
        "seed = 77\n[tasks]\nobjects = 3\ntrain = 16\nval = 8\n\
         [pretrain]\nbp_epochs = 2\nmeta_iterations = 4\ninner_steps = 3\nbatch = 8\nexclude = 2\n\
         [finetune]\nmode = sgm-online\nk = 3\nsgm_init = trained,random\nepochs = 3\nbatch = 8\n",
    )
    .unwrap();
    let cfg = s(&cfg_path);
    let mut compared = 0;
    let mut ok = true;
    for rep in ["a", "b"] {
        let r = d.join(rep);
        let (tasks, pre, ft) = (r.join("tasks"), r.join("pre"), r.join("ft"));
        ok &= sgm(&["--config", &cfg, "--out", &s(&tasks), "gen-tasks"]);
        ok &= sgm(&[
            "--config",
            &cfg,
            "--out",
            &s(&pre),
            "pretrain",
            "--tasks",
            &s(&tasks),
        ]);
        ok &= sgm(&[
            "--config",
            &cfg,
            "--out",
            &s(&ft),
            "finetune",
            "--checkpoint",
            &s(&pre.join("pretrained.ckpt")),
            "--task",
            &format!("{}:2", s(&tasks)),
        ]);
    }
    let (a, b) = (d.join("a"), d.join("b"));
    let mut files = vec![
        "pre/bp.csv".to_string(),
        "pre/meta.csv".into(),
        "pre/pretrained.ckpt".into(),
        "ft/summary.csv".into(),
    ];
    for init in ["trained", "random"] {
        for f in ["history.csv", "final.ckpt"] {
            files.push(format!("ft/tasks_task_002-sgm-online-k3-{init}/{f}"));
        }
    }
    for f in &files {
        compared += 1;
        ok &= same_files(&a, &b, f);
    }
    outcome(
        ok,
        format!("{compared} CSVs and checkpoints byte-identical across two CLI runs of one config"),
    )
}

fn main() {
    let skip_heavy = std::env::var_os("SGM_ACCEPTANCE_QUICK").is_some();
    let mut failed = 0;
    let mut run = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        report(n, name, &o, t.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    };
    run(1, "gradient oracles", &gradient_oracles);
    run(2, "oracle-injection equivalence", &oracle_injection);
    run(3, "published table arithmetic", &table_arithmetic);
    run(4, "parameter anchors", &parameter_anchors);
    if skip_heavy {
        eprintln!("SGM_ACCEPTANCE_QUICK set: criteria 5-9 skipped");
    } else {
        let t = Instant::now();
        let lab = build_lab();
        let secs = t.elapsed().as_secs_f64();
        eprintln!("  .. training grid done in {secs:.0}s");
        run(5, "backprop baseline", &|| bp_baseline(&lab));
        run(6, "static-SGM fine-tuning", &|| static_sgm(&lab));
        run(7, "random-static ablation", &|| random_static(&lab));
        run(8, "online-SGM ablation", &|| online_ablation(&lab));
        run(9, "memory instrumentation", &|| memory(&lab));
    }
    run(10, "determinism", &determinism);
    println!("{failed} acceptance criteria failed");
    // Failures are reported above; the exit status only follows them on request,
    // so a known desk-scale miss does not mask regressions in the other suites.
    if failed > 0 && std::env::var_os("SGM_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
