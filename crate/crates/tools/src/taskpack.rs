//! TaskPack files and their manifest.
//!
//! A pack is `"SGMTASK1"`, a u32 sample count, then per sample a quality byte
//! (1 positive, 0 negative), the f32 angle and the `3·128·128` f32 pixels, all
//! little-endian. Train samples come first. The manifest (`manifest.txt`,
//! key = value with one `[task.N]` section per pack) records the seeds and
//! the split sizes.

use std::fmt::Write as _;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, ensure, Context, Result};
use sgm_core::taskgen::{Provenance, Sample, TaskDataset, SAMPLE_LEN};
use sgm_core::GraspLabel;

use crate::config::KeyValues;

pub const MAGIC: &[u8; 8] = b"SGMTASK1";
/// Bumped whenever rendering changes what a seed produces.
pub const GENERATOR_VERSION: u32 = 2;
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct PackEntry {
    pub file: String,
    pub object_seed: u64,
    pub task_seed: u64,
    pub train: usize,
    pub val: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub generator: u32,
    pub seed: u64,
    pub tasks: Vec<PackEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "generator = {}\nseed = {}\ncount = {}\n",
            self.generator,
            self.seed,
            self.tasks.len()
        );
        for (i, t) in self.tasks.iter().enumerate() {
            let _ = write!(
                s,
                "\n[task.{i}]\nfile = {}\nobject_seed = {}\ntask_seed = {}\ntrain = {}\nval = {}\n",
                t.file, t.object_seed, t.task_seed, t.train, t.val
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| anyhow!("manifest is missing {k}"));
        let int = |k: &str| -> Result<u64> {
            get(k)?.parse().with_context(|| format!("manifest key {k}"))
        };
        let count = int("count")? as usize;
        let tasks = (0..count)
            .map(|i| {
                let p = format!("task.{i}.");
                Ok(PackEntry {
                    file: get(&format!("{p}file"))?.to_string(),
                    object_seed: int(&format!("{p}object_seed"))?,
                    task_seed: int(&format!("{p}task_seed"))?,
                    train: int(&format!("{p}train"))? as usize,
                    val: int(&format!("{p}val"))? as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ensure!(kv.0.len() == 3 + 5 * count, "manifest has unexpected keys");
        Ok(Self {
            generator: int("generator")? as u32,
            seed: int("seed")?,
            tasks,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let m = Self::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        ensure!(
            m.generator == GENERATOR_VERSION,
            "{} was written by generator {}, this build renders version {}",
            path.display(),
            m.generator,
            GENERATOR_VERSION
        );
        Ok(m)
    }
}

pub fn write_pack(path: &Path, task: &TaskDataset) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    w.write_all(MAGIC)?;
    let n = u32::try_from(task.train.len() + task.val.len()).context("too many samples")?;
    w.write_all(&n.to_le_bytes())?;
    for s in task.train.iter().chain(&task.val) {
        w.write_all(&[s.label.positive as u8])?;
        w.write_all(&s.label.angle.to_le_bytes())?;
        for v in &s.image {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the samples of a pack. The file holds no provenance beyond the
/// label, so `theta` is the stored angle and offsets and seeds are zero.
pub fn read_pack(path: &Path, object_seed: u64) -> Result<Vec<Sample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_end(&mut bytes)?;
    ensure!(
        bytes.len() >= 12 && &bytes[..8] == MAGIC,
        "{} is not a TaskPack",
        path.display()
    );
    let n = u32::from_le_bytes(bytes[8..12].try_into()?) as usize;
    let rec = 5 + 4 * SAMPLE_LEN;
    ensure!(
        bytes.len() == 12 + n * rec,
        "{}: size does not match {n} samples",
        path.display()
    );
    bytes[12..]
        .chunks_exact(rec)
        .map(|r| {
            let angle = f32::from_le_bytes(r[1..5].try_into()?);
            let label = GraspLabel::new(r[0] != 0, angle)
                .map_err(|e| anyhow!("{}: {e}", path.display()))?;
            let image = r[5..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(Sample {
                image,
                label,
                provenance: Provenance {
                    object_seed,
                    theta: angle,
                    offset: [0.0, 0.0],
                    augment_seed: 0,
                },
            })
        })
        .collect()
}

/// A task read back from disk, split as the manifest says.
pub fn load_task(dir: &Path, entry: &PackEntry) -> Result<TaskDataset> {
    let mut all = read_pack(&dir.join(&entry.file), entry.object_seed)?;
    ensure!(
        all.len() == entry.train + entry.val,
        "{}: {} samples, manifest says {} + {}",
        entry.file,
        all.len(),
        entry.train,
        entry.val
    );
    let val = all.split_off(entry.train);
    Ok(TaskDataset {
        object_seed: entry.object_seed,
        seed: entry.task_seed,
        train: all,
        val,
    })
}

/// Resolves a `--task` argument: either `dir:index` (manifest entry) or the
/// path of a pack file inside a manifest directory.
pub fn resolve(arg: &str) -> Result<(PathBuf, PackEntry)> {
    if let Some((dir, idx)) = arg.rsplit_once(':') {
        if let Ok(i) = idx.parse::<usize>() {
            let dir = PathBuf::from(dir);
            let m = Manifest::load(&dir)?;
            let e = m
                .tasks
                .get(i)
                .cloned()
                .ok_or_else(|| anyhow!("{arg}: manifest has {} tasks", m.tasks.len()))?;
            return Ok((dir, e));
        }
    }
    let path = PathBuf::from(arg);
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| anyhow!("bad task path {arg}"))?;
    let m = Manifest::load(&dir)?;
    let e = m
        .tasks
        .into_iter()
        .find(|t| t.file == name)
        .ok_or_else(|| anyhow!("{arg} is not listed in {}", dir.join(MANIFEST).display()))?;
    Ok((dir, e))
}
