//! Binary checkpoints.
//!
//! ```text
//! "SGMCKPT1" | version u8 | config digest u64
//! layer count u32, then per layer: array count u32, per array: len u32, f32 * len
//! optional "SGMS" section:
//!   module count u32, per module: attach u32, channels u32, hidden u32,
//!   kernel u32, use_label u8, has_bn u8, is_static u8, then arrays as above
//! ```
//!
//! All integers and floats little-endian. Arrays follow `state()` order.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use sgm_core::{build_model, Model, ModelConfig, SgModule, SgmConfig};

pub const MAGIC: &[u8; 8] = b"SGMCKPT1";
pub const VERSION: u8 = 1;
const SGM_TAG: &[u8; 4] = b"SGMS";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).context("value exceeds u32")?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_arrays(out: &mut Vec<u8>, arrays: &[&[f32]]) -> Result<()> {
    put_u32(out, arrays.len())?;
    for a in arrays {
        put_u32(out, a.len())?;
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode(model: &Model, sgms: &[SgModule]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&model.config.digest().to_le_bytes());
    put_u32(&mut out, model.layers.len())?;
    for l in &model.layers {
        put_arrays(&mut out, &l.state())?;
    }
    if !sgms.is_empty() {
        out.extend_from_slice(SGM_TAG);
        put_u32(&mut out, sgms.len())?;
        for s in sgms {
            let c = s.config;
            for v in [c.attach_layer, c.channels, c.hidden, c.kernel] {
                put_u32(&mut out, v)?;
            }
            out.extend_from_slice(&[c.use_label as u8, s.bn.is_some() as u8, s.is_static as u8]);
            put_arrays(&mut out, &s.state())?;
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        ensure!(self.bytes.len() >= n, "checkpoint truncated");
        let (a, b) = self.bytes.split_at(n);
        self.bytes = b;
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?) as usize)
    }

    fn arrays_into(&mut self, dst: Vec<&mut [f32]>) -> Result<()> {
        let n = self.u32()?;
        ensure!(n == dst.len(), "expected {} arrays, found {n}", dst.len());
        for d in dst {
            let len = self.u32()?;
            ensure!(len == d.len(), "array length {len}, expected {}", d.len());
            for (v, b) in d.iter_mut().zip(self.take(4 * len)?.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into()?);
            }
        }
        Ok(())
    }
}

/// Decodes a checkpoint of a model built from `config`.
pub fn decode(bytes: &[u8], config: &ModelConfig) -> Result<(Model, Vec<SgModule>)> {
    let mut r = Reader { bytes };
    ensure!(r.take(8)? == MAGIC, "not a checkpoint (bad magic)");
    let version = r.u8()?;
    ensure!(
        version == VERSION,
        "unsupported checkpoint version {version}"
    );
    let digest = u64::from_le_bytes(r.take(8)?.try_into()?);
    ensure!(
        digest == config.digest(),
        "checkpoint was written for a different model configuration"
    );
    let mut model = build_model(config.clone(), 0)?;
    let n = r.u32()?;
    ensure!(
        n == model.layers.len(),
        "checkpoint has {n} layers, model {}",
        model.layers.len()
    );
    for l in &mut model.layers {
        r.arrays_into(l.state_mut())?;
    }
    let mut sgms = Vec::new();
    if !r.bytes.is_empty() {
        ensure!(r.take(4)? == SGM_TAG, "unknown trailing section");
        for _ in 0..r.u32()? {
            let (attach_layer, channels, hidden, kernel) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
            let (use_label, has_bn, is_static) = (r.u8()? != 0, r.u8()? != 0, r.u8()? != 0);
            let config = SgmConfig {
                attach_layer,
                channels,
                hidden,
                kernel,
                use_label,
            };
            let mut s = SgModule::new(config, 0)?;
            if !has_bn {
                s.is_static = true;
                s = s.fold()?;
            }
            s.is_static = is_static;
            r.arrays_into(s.state_mut())?;
            sgms.push(s);
        }
        ensure!(r.bytes.is_empty(), "trailing bytes after SGM section");
    }
    Ok((model, sgms))
}

pub fn save(path: &Path, model: &Model, sgms: &[SgModule]) -> Result<()> {
    let bytes = encode(model, sgms)?;
    let mut f =
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Vec<SgModule>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_end(&mut bytes)?;
    decode(&bytes, &ModelConfig::reference()).with_context(|| format!("reading {}", path.display()))
}

/// Fails unless every trailing layer below the head has an SGM.
pub fn require_sgms(model: &Model, sgms: &[SgModule], k: usize) -> Result<()> {
    let n = model.layers.len();
    for i in n.saturating_sub(k)..n.saturating_sub(1) {
        if !sgms.iter().any(|s| s.config.attach_layer == i) {
            bail!("checkpoint has no SGM for layer {}", i + 1);
        }
    }
    Ok(())
}
