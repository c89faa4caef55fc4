//! Binary checkpoints: named f32 tensors plus a JSON config echo.
//!
//! Layout (little-endian):
//!
//! ```text
//! "LVCK" | version u8 | stage u8 | meta_len u32 | meta JSON
//! count u32 | count x (name_len u16 | name | ndim u8 | dims u32.. | f32 payload | fnv1a64 u64)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LVCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Everything besides weights needed to rebuild a [`Pipeline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub pipeline: PipelineConfig,
    pub token_scale: f64,
    /// Training steps taken so far in this stage.
    pub steps: usize,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

/// Name-sorted FNV-1a checksums of every parameter's f32 bytes.
pub fn checksums(store: &ParamStore, prefix: &str) -> Result<Vec<(String, u64)>> {
    store
        .named_vars()
        .into_iter()
        .filter(|(name, _)| name.starts_with(prefix))
        .map(|(name, var)| Ok((name, fnv1a64(&tensor_bytes(var.as_tensor())?))))
        .collect()
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save(pipeline: &Pipeline, stage: u8, steps: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let meta = CheckpointMeta { pipeline: pipeline.config().clone(), token_scale: pipeline.token_scale(), steps };
    let meta_json = serde_json::to_vec(&meta)?;
    let vars = pipeline.store().named_vars();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.push(stage);
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(vars.len() as u32).to_le_bytes());
    for (name, var) in &vars {
        let dims = var.dims();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dims.len() as u8);
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let payload = tensor_bytes(var.as_tensor())?;
        buf.extend_from_slice(&payload);
        buf.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    log::info!("saved stage-{stage} checkpoint {} ({} tensors)", path.display(), vars.len());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// A decoded checkpoint: the rebuilt pipeline, its stage tag and metadata.
pub struct Loaded {
    pub pipeline: Pipeline,
    pub stage: u8,
    pub meta: CheckpointMeta,
}

/// Reads a checkpoint. Every parameter of the rebuilt pipeline must be
/// present with the stored shape, and every payload must match its checksum.
pub fn load(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let version = c.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")));
    }
    let stage = c.u8()?;
    let meta_len = c.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len)?)?;
    let mut pipeline = Pipeline::new(meta.pipeline.clone(), 0)?;
    pipeline.set_token_scale(meta.token_scale)?;
    let expected: Vec<String> = pipeline.store().named_vars().into_iter().map(|(n, _)| n).collect();
    let count = c.u32()? as usize;
    let mut seen = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = usize::from(c.u16()?);
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = usize::from(c.u8()?);
        let dims = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let payload = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let sum = c.u64()?;
        if fnv1a64(payload) != sum {
            return Err(Error::Format(format!("checksum mismatch in tensor {name}")));
        }
        log::debug!("loaded {name} {dims:?} fnv1a64={sum:016x}");
        let values: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let t = Tensor::from_vec(values, dims, &Device::Cpu)?;
        pipeline.store().set(&name, &t)?;
        seen.push(name);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
    }
    seen.sort();
    if seen != expected {
        let missing: Vec<_> = expected.iter().filter(|n| seen.binary_search(n).is_err()).collect();
        return Err(Error::Format(format!(
            "checkpoint tensors do not match the model ({} stored, {} expected; missing {:?})",
            seen.len(),
            expected.len(),
            missing.iter().take(5).collect::<Vec<_>>()
        )));
    }
    log::info!("loaded stage-{stage} checkpoint {} ({count} tensors verified)", path.display());
    Ok(Loaded { pipeline, stage, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageTensor;

    #[test]
    fn round_trip_gives_identical_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut p = Pipeline::new(PipelineConfig::tiny(), 11).unwrap();
        p.set_token_scale(2.5).unwrap();
        save(&p, 2, 17, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!((loaded.stage, loaded.meta.steps, loaded.pipeline.token_scale()), (2, 17, 2.5));
        assert_eq!(checksums(p.store(), "").unwrap(), checksums(loaded.pipeline.store(), "").unwrap());
        let img = ImageTensor::from_vec(3, 64, 64, (0..3 * 64 * 64).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap();
        let a = p.codec().reconstruct_direct(&img, 1).unwrap().to_vec().unwrap();
        let b = loaded.pipeline.codec().reconstruct_direct(&img, 1).unwrap().to_vec().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save(&Pipeline::new(PipelineConfig::tiny(), 1).unwrap(), 1, 0, &path).unwrap();
        let good = std::fs::read(&path).unwrap();
        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
        let mut flipped = good.clone();
        let last = flipped.len() - 20;
        flipped[last] ^= 0x55;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(load(&path).is_err());
    }
}
