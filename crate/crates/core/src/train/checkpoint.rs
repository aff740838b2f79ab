//! Binary checkpoint: `STXV3` magic, u32 version, u64 metadata length,
//! canonical JSON metadata, u32 tensor count, a tensor table and a trailing
//! CRC32 over every preceding byte. Integers are little-endian.
//!
//! Tensor entry: u32 name length, name bytes, u8 dtype code (0 = f32), u32
//! rank, u64 per dimension, raw little-endian data. Parameters come first
//! in store order, then `adam.m.<name>` and `adam.v.<name>` for each.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{StageRecord, Trainer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Adam, AdamConfig};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"STXV3";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub adam_steps: u64,
    pub step: u64,
    pub seed: u64,
    pub lineage: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointInfo {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorInfo>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_to_bytes(trainer: &Trainer) -> Vec<u8> {
    let model = &trainer.model;
    let meta = CheckpointMeta {
        model: model.config.clone(),
        adam: trainer.adam.config,
        adam_steps: trainer.adam.steps(),
        step: trainer.step,
        seed: trainer.seed,
        lineage: trainer.lineage.clone(),
    };
    let json = serde_json::to_string(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    let n = model.store.len();
    out.extend_from_slice(&(3 * n as u32).to_le_bytes());
    for (name, t) in model.store.iter() {
        put_tensor(&mut out, name, t.shape(), t.data());
    }
    let (m, v) = trainer.adam.moments();
    for (prefix, moments) in [("adam.m.", m), ("adam.v.", v)] {
        for ((name, t), mom) in model.store.iter().zip(moments) {
            put_tensor(&mut out, &format!("{prefix}{name}"), t.shape(), mom);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity("checkpoint ends inside a field".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("length does not fit in memory".into()))
    }
}

struct RawTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Verifies the checksum and header, then splits metadata and tensors.
fn parse(bytes: &[u8]) -> Result<(u32, CheckpointMeta, Vec<RawTensor>)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 8 + 4 + 4 {
        return Err(Error::Integrity(format!("checkpoint is truncated ({} bytes)", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Integrity("checksum mismatch: checkpoint is corrupt or truncated".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint format version {version}; this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let json_len = r.len()?;
    let json = std::str::from_utf8(r.take(json_len)?).map_err(|_| Error::Integrity("metadata is not UTF-8".into()))?;
    let meta: CheckpointMeta =
        serde_json::from_str(json).map_err(|e| Error::Integrity(format!("metadata does not parse: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Compatibility(format!("tensor {name} has unsupported dtype code {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<usize>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Integrity(format!("tensor {name} is too large")))?;
        let raw = r.take(numel)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(RawTensor { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after the tensor table".into()));
    }
    Ok((version, meta, tensors))
}

/// Rebuilds a trainer. Every parameter and moment must be present with the
/// shape the stored configuration implies.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let (_, meta, tensors) = parse(bytes)?;
    let mut model: Model<f32> = Model::new(meta.model.clone(), 0)?;
    let n = model.store.len();
    if tensors.len() != 3 * n {
        return Err(Error::Compatibility(format!("expected {} tensors, found {}", 3 * n, tensors.len())));
    }
    let names: Vec<String> = model.store.iter().map(|(name, _)| name.to_string()).collect();
    let shapes: Vec<Vec<usize>> = model.store.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let expect = |t: &RawTensor, name: &str, shape: &[usize]| -> Result<()> {
        if t.name != name || t.shape != shape {
            return Err(Error::Compatibility(format!(
                "tensor {} {:?} found where {name} {shape:?} was expected",
                t.name, t.shape
            )));
        }
        Ok(())
    };
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (i, t) in tensors.into_iter().enumerate() {
        let (k, slot) = (i % n, i / n);
        let name = match slot {
            0 => names[k].clone(),
            1 => format!("adam.m.{}", names[k]),
            _ => format!("adam.v.{}", names[k]),
        };
        expect(&t, &name, &shapes[k])?;
        match slot {
            0 => model.store.assign(&names[k], &t.data)?,
            1 => m.push(t.data),
            _ => v.push(t.data),
        }
    }
    let adam = Adam::from_state(meta.adam, m, v, meta.adam_steps);
    Ok(Trainer { model, adam, step: meta.step, seed: meta.seed, lineage: meta.lineage })
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(trainer)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Loads a checkpoint that must have been written for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Trainer> {
    let trainer = load_checkpoint(path)?;
    if &trainer.model.config != expected {
        return Err(Error::Compatibility(format!(
            "checkpoint {} was written for a different model configuration (vocabulary {} vs {})",
            path.display(),
            trainer.model.config.decoder.vocab_size,
            expected.decoder.vocab_size
        )));
    }
    Ok(trainer)
}

/// Header and per-tensor statistics, without building a model.
pub fn read_checkpoint_info(path: &Path) -> Result<CheckpointInfo> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (version, meta, tensors) = parse(&bytes)?;
    let tensors = tensors
        .into_iter()
        .map(|t| {
            let n = t.data.len().max(1) as f64;
            let mean = t.data.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
            let var = t.data.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
            let min = t.data.iter().copied().fold(f32::INFINITY, f32::min);
            let max = t.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            TensorInfo { name: t.name, shape: t.shape, mean, std: var.sqrt(), min: f64::from(min), max: f64::from(max) }
        })
        .collect();
    Ok(CheckpointInfo { version, meta, tensors })
}
