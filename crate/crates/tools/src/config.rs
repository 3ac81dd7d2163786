//! Run configuration: a flat `key = value` text file with `[section]`
//! headers. Every run directory gets the fully resolved config as `run.cfg`,
//! which replays the run when passed back through `--config`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sgm_core::optim::OptimizerConfig;
use sgm_core::trainer::{FinetuneConfig, FinetuneMode, MetaConfig, SgmInit};

/// Parsed `section.key -> value` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("line {}: unterminated section header", no + 1))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", no + 1))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{}.{}", section, k.trim())
            };
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                bail!("line {}: duplicate key {key}", no + 1);
            }
        }
        Ok(Self(map))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSource {
    Reference,
    Paper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskGenSettings {
    pub objects: usize,
    pub train: usize,
    pub val: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSettings {
    /// Backprop epochs over the union of all tasks before meta-pretraining.
    pub bp_epochs: usize,
    pub bp_lr: f32,
    pub meta_iterations: usize,
    pub inner_steps: usize,
    pub inner_lr: f32,
    pub sgm_lr: f32,
    pub outer_step: f32,
    pub layers: usize,
    pub batch: usize,
    /// Manifest index of the held-out task (leave-one-out), if any.
    pub exclude: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSettings {
    pub mode: FinetuneMode,
    pub k: usize,
    /// More than one entry runs a grid, one run per init.
    pub sgm_init: Vec<SgmInit>,
    pub epochs: usize,
    pub batch: usize,
    /// Learning rate of the model optimizer; `None` picks the mode default.
    pub lr: Option<f32>,
    /// Adam learning rate of online SGMs.
    pub sgm_lr: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccountSettings {
    pub rows: RowSource,
    pub batch: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub tasks: TaskGenSettings,
    pub pretrain: PretrainSettings,
    pub finetune: FinetuneSettings,
    pub account: AccountSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: TaskGenSettings {
                objects: 7,
                train: 800,
                val: 200,
            },
            pretrain: PretrainSettings {
                bp_epochs: 20,
                bp_lr: 1e-3,
                meta_iterations: 1500,
                inner_steps: 20,
                inner_lr: 0.1,
                sgm_lr: 1e-3,
                outer_step: 0.5,
                layers: 3,
                batch: 32,
                exclude: None,
            },
            finetune: FinetuneSettings {
                mode: FinetuneMode::SgmStatic,
                k: 3,
                sgm_init: vec![SgmInit::Trained],
                epochs: 50,
                batch: 32,
                lr: None,
                sgm_lr: 3e-5,
            },
            account: AccountSettings {
                rows: RowSource::Reference,
                batch: 32,
                k: 3,
            },
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))
}

pub fn mode_name(m: FinetuneMode) -> &'static str {
    match m {
        FinetuneMode::Bp => "bp",
        FinetuneMode::SgmStatic => "sgm-static",
        FinetuneMode::SgmOnline => "sgm-online",
    }
}

pub fn parse_mode(v: &str) -> Result<FinetuneMode> {
    Ok(match v {
        "bp" => FinetuneMode::Bp,
        "sgm-static" => FinetuneMode::SgmStatic,
        "sgm-online" => FinetuneMode::SgmOnline,
        _ => bail!("unknown mode {v:?} (bp, sgm-static, sgm-online)"),
    })
}

pub fn init_name(i: SgmInit) -> &'static str {
    match i {
        SgmInit::Trained => "trained",
        SgmInit::Random => "random",
    }
}

fn parse_inits(v: &str) -> Result<Vec<SgmInit>> {
    let out = v
        .split(',')
        .map(|s| match s.trim() {
            "trained" => Ok(SgmInit::Trained),
            "random" => Ok(SgmInit::Random),
            o => Err(anyhow!("unknown sgm_init {o:?} (trained, random)")),
        })
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        bail!("sgm_init is empty");
    }
    Ok(out)
}

impl RunConfig {
    /// Applies `section.key = value` pairs on top of `self`. Unknown keys are
    /// errors so typos never pass silently.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (key, v) in &kv.0 {
            let k = key.as_str();
            match k {
                "seed" | "run.seed" => self.seed = num(k, v)?,
                "tasks.objects" => self.tasks.objects = num(k, v)?,
                "tasks.train" => self.tasks.train = num(k, v)?,
                "tasks.val" => self.tasks.val = num(k, v)?,
                "pretrain.bp_epochs" => self.pretrain.bp_epochs = num(k, v)?,
                "pretrain.bp_lr" => self.pretrain.bp_lr = num(k, v)?,
                "pretrain.meta_iterations" => self.pretrain.meta_iterations = num(k, v)?,
                "pretrain.inner_steps" => self.pretrain.inner_steps = num(k, v)?,
                "pretrain.inner_lr" => self.pretrain.inner_lr = num(k, v)?,
                "pretrain.sgm_lr" => self.pretrain.sgm_lr = num(k, v)?,
                "pretrain.outer_step" => self.pretrain.outer_step = num(k, v)?,
                "pretrain.layers" => self.pretrain.layers = num(k, v)?,
                "pretrain.batch" => self.pretrain.batch = num(k, v)?,
                "pretrain.exclude" => {
                    self.pretrain.exclude = if v == "none" { None } else { Some(num(k, v)?) }
                }
                "finetune.mode" => self.finetune.mode = parse_mode(v)?,
                "finetune.k" => self.finetune.k = num(k, v)?,
                "finetune.sgm_init" => self.finetune.sgm_init = parse_inits(v)?,
                "finetune.epochs" => self.finetune.epochs = num(k, v)?,
                "finetune.batch" => self.finetune.batch = num(k, v)?,
                "finetune.lr" => {
                    self.finetune.lr = if v == "default" {
                        None
                    } else {
                        Some(num(k, v)?)
                    }
                }
                "finetune.sgm_lr" => self.finetune.sgm_lr = num(k, v)?,
                "account.rows" => {
                    self.account.rows = match v.as_str() {
                        "reference" => RowSource::Reference,
                        "paper" => RowSource::Paper,
                        _ => bail!("account.rows: expected reference or paper, got {v:?}"),
                    }
                }
                "account.batch" => self.account.batch = num(k, v)?,
                "account.k" => self.account.k = num(k, v)?,
                _ => bail!("unknown config key {k:?}"),
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply(&KeyValues::parse(&text)?)?;
        Ok(cfg)
    }

    /// Canonical text form; `parse` + `apply` on it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.pretrain;
        let f = &self.finetune;
        let inits: Vec<&str> = f.sgm_init.iter().map(|&i| init_name(i)).collect();
        // writing to a String cannot fail
        let _ = write!(
            s,
            "seed = {}\n\n[tasks]\nobjects = {}\ntrain = {}\nval = {}\n\n\
             [pretrain]\nbp_epochs = {}\nbp_lr = {}\nmeta_iterations = {}\ninner_steps = {}\ninner_lr = {}\n\
             sgm_lr = {}\nouter_step = {}\nlayers = {}\nbatch = {}\nexclude = {}\n\n\
             [finetune]\nmode = {}\nk = {}\nsgm_init = {}\nepochs = {}\nbatch = {}\nlr = {}\nsgm_lr = {}\n\n\
             [account]\nrows = {}\nbatch = {}\nk = {}\n",
            self.seed,
            self.tasks.objects,
            self.tasks.train,
            self.tasks.val,
            p.bp_epochs,
            p.bp_lr,
            p.meta_iterations,
            p.inner_steps,
            p.inner_lr,
            p.sgm_lr,
            p.outer_step,
            p.layers,
            p.batch,
            p.exclude.map_or("none".to_string(), |e| e.to_string()),
            mode_name(f.mode),
            f.k,
            inits.join(","),
            f.epochs,
            f.batch,
            f.lr.map_or("default".to_string(), |l| l.to_string()),
            f.sgm_lr,
            match self.account.rows {
                RowSource::Reference => "reference",
                RowSource::Paper => "paper",
            },
            self.account.batch,
            self.account.k,
        );
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("run.cfg"), self.to_text())
            .with_context(|| format!("writing run.cfg in {}", dir.display()))
    }

    /// Backprop pretraining over all layers.
    pub fn bp_pretrain_config(&self) -> FinetuneConfig {
        let mut c = FinetuneConfig::bp(6, self.seed);
        c.epochs = self.pretrain.bp_epochs;
        c.batch_size = self.pretrain.batch;
        c.optimizer = OptimizerConfig::adam(self.pretrain.bp_lr);
        c
    }

    pub fn meta_config(&self) -> MetaConfig {
        let p = &self.pretrain;
        MetaConfig {
            meta_iterations: p.meta_iterations,
            inner_steps: p.inner_steps,
            inner_optimizer: OptimizerConfig::sgd(p.inner_lr, 0.9),
            sgm_optimizer: OptimizerConfig::adam(p.sgm_lr),
            outer_step: p.outer_step,
            batch_size: p.batch,
            layers: p.layers,
            seed: self.seed,
            ..MetaConfig::default()
        }
    }

    pub fn finetune_config(&self, init: SgmInit) -> FinetuneConfig {
        let f = &self.finetune;
        let mut c = match f.mode {
            FinetuneMode::Bp => FinetuneConfig::bp(f.k, self.seed),
            m => FinetuneConfig::sgm(m, f.k, init, self.seed),
        };
        c.epochs = f.epochs;
        c.batch_size = f.batch;
        c.sgm_optimizer = OptimizerConfig::adam(f.sgm_lr);
        if let Some(lr) = f.lr {
            c.optimizer = match c.optimizer {
                OptimizerConfig::Adam { .. } => OptimizerConfig::adam(lr),
                OptimizerConfig::SgdMomentum { momentum, .. } => OptimizerConfig::sgd(lr, momentum),
            };
        }
        c
    }
}
