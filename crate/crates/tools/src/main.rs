use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sgm_tools::commands::{self, CmdResult, Failure};
use sgm_tools::config::{parse_mode, KeyValues, RunConfig};

/// Feed-forward fine-tuning with static synthetic gradient modules.
#[derive(Parser, Debug)]
#[command(name = "sgm", version)]
struct Cli {
    /// Global seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key = value config file with [section] headers.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Extra `section.key=value` overrides, applied after --config.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate one TaskPack per procedural object, plus a manifest.
    GenTasks {
        #[arg(long)]
        objects: Option<usize>,
    },
    /// Backprop pretraining followed by meta-pretraining of model and SGMs.
    Pretrain {
        /// Directory holding manifest.txt.
        #[arg(long)]
        tasks: PathBuf,
        /// Manifest index to hold out.
        #[arg(long)]
        exclude: Option<usize>,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fine-tune on one or more tasks (`dir:index` or a pack path).
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "task", required = true)]
        tasks: Vec<String>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// `trained`, `random` or both, comma separated.
        #[arg(long)]
        sgm_init: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "task", required = true)]
        tasks: Vec<String>,
    },
    /// Resource accounting report.
    Account {
        /// `reference` or `paper`.
        #[arg(long)]
        rows: Option<String>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// SVG charts of history CSVs.
    Plot { csv: Vec<PathBuf> },
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut kv = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects key=value, got {s:?}"))?;
        kv.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.push((k.to_string(), v));
        }
    };
    push("seed", cli.seed.map(|s| s.to_string()));
    match &cli.cmd {
        Cmd::GenTasks { objects } => push("tasks.objects", objects.map(|v| v.to_string())),
        Cmd::Pretrain { exclude, .. } => push("pretrain.exclude", exclude.map(|v| v.to_string())),
        Cmd::Finetune {
            mode,
            k,
            sgm_init,
            epochs,
            ..
        } => {
            if let Some(m) = mode {
                parse_mode(m)?;
            }
            push("finetune.mode", mode.clone());
            push("finetune.k", k.map(|v| v.to_string()));
            push("finetune.sgm_init", sgm_init.clone());
            push("finetune.epochs", epochs.map(|v| v.to_string()));
        }
        Cmd::Account { rows, batch, k } => {
            push("account.rows", rows.clone());
            push("account.batch", batch.map(|v| v.to_string()));
            push("account.k", k.map(|v| v.to_string()));
        }
        Cmd::Eval { .. } | Cmd::Plot { .. } => {}
    }
    for (k, v) in kv {
        cfg.apply(&KeyValues([(k, v)].into_iter().collect()))?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CmdResult {
    let cfg = resolve(cli).map_err(Failure::Usage)?;
    let out = cli.out.as_path();
    match &cli.cmd {
        Cmd::GenTasks { .. } => {
            let m = commands::gen_tasks(&cfg, out)?;
            eprintln!("wrote {} task packs to {}", m.tasks.len(), out.display());
        }
        Cmd::Pretrain { tasks, init, .. } => commands::pretrain(&cfg, tasks, init.as_deref(), out)?,
        Cmd::Finetune {
            checkpoint, tasks, ..
        } => {
            for s in commands::finetune_cmd(&cfg, checkpoint, tasks, out)? {
                println!(
                    "{} {} k={} {}: det {:.3} mae {:.2}{}",
                    s.task,
                    s.mode,
                    s.k,
                    s.sgm_init,
                    s.det_acc,
                    s.angle_mae_deg,
                    s.diverged_at
                        .map_or(String::new(), |e| format!(" (diverged in epoch {e})"))
                );
            }
        }
        Cmd::Eval { checkpoint, tasks } => commands::eval_cmd(&cfg, checkpoint, tasks, out)?,
        Cmd::Account { .. } => print!("{}", commands::account_cmd(&cfg, out)?),
        Cmd::Plot { csv } => commands::plot_cmd(&cfg, csv, out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
