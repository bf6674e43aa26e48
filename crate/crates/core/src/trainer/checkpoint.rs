//! Binary checkpoint format: magic "HFDN", format version, tensor count;
//! per tensor a length-prefixed UTF-8 name, dtype code (0 = f32, 1 = f64),
//! rank, u64 extents, and little-endian raw values; a trailing CRC32 of all
//! preceding bytes. Loading rejects wrong magic, version, or CRC.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::seeded_rng;
use crate::model::{Block, ModelConfig, SegModel};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"HFDN";
pub const FORMAT_VERSION: u32 = 1;

/// One named tensor in a checkpoint.
#[derive(Debug)]
pub struct TensorEntry<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

/// CRC-32 (IEEE, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

pub fn checkpoint_bytes<S: Scalar>(entries: &[TensorEntry<S>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(S::DTYPE.code());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match S::DTYPE {
            Dtype::F32 => {
                for &v in &e.data {
                    out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in &e.data {
                    out.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn parse_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Vec<TensorEntry<S>>> {
    let fail = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 {
        return Err(fail("truncated header"));
    }
    let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32(payload) != stored {
        return Err(fail("CRC mismatch"));
    }
    if payload[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let mut pos = 4;
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        if *pos + 4 > payload.len() {
            return Err(fail("truncated"));
        }
        let v = u32::from_le_bytes(payload[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let version = read_u32(&mut pos)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = read_u32(&mut pos)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        if pos + name_len > payload.len() {
            return Err(fail("truncated name"));
        }
        let name = std::str::from_utf8(&payload[pos..pos + name_len])
            .map_err(|_| fail("name is not UTF-8"))?
            .to_string();
        pos += name_len;
        if pos >= payload.len() {
            return Err(fail("truncated dtype"));
        }
        let dtype = Dtype::from_code(payload[pos])
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {}", payload[pos])))?;
        pos += 1;
        if dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has dtype {dtype:?}, run expects {:?}",
                S::DTYPE
            )));
        }
        let rank = read_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            if pos + 8 > payload.len() {
                return Err(fail("truncated extents"));
            }
            shape.push(u64::from_le_bytes(payload[pos..pos + 8].try_into().unwrap()) as usize);
            pos += 8;
        }
        let numel: usize = shape.iter().product();
        let width = dtype.byte_width();
        if pos + numel * width > payload.len() {
            return Err(fail("truncated tensor data"));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = pos + i * width;
            let v = match dtype {
                Dtype::F32 => {
                    f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()) as f64
                }
                Dtype::F64 => f64::from_le_bytes(payload[at..at + 8].try_into().unwrap()),
            };
            data.push(S::of(v));
        }
        pos += numel * width;
        entries.push(TensorEntry { name, shape, data });
    }
    if pos != payload.len() {
        return Err(fail("trailing bytes after last tensor"));
    }
    Ok(entries)
}

pub fn save_checkpoint<S: Scalar>(path: &Path, entries: &[TensorEntry<S>]) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(entries)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Vec<TensorEntry<S>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

// ---------------------------------------------------------------------------
// model <-> checkpoint
// ---------------------------------------------------------------------------

/// Flattens a model to checkpoint entries: every parameter, every running
/// buffer, and two config pseudo-tensors describing class count and the
/// aggregation chain.
pub fn model_entries<S: Scalar>(model: &mut SegModel<S>) -> Vec<TensorEntry<S>> {
    let mut entries = Vec::new();
    entries.push(TensorEntry {
        name: "config.num_classes".to_string(),
        shape: vec![1],
        data: vec![S::of_usize(model.num_classes())],
    });
    entries.push(TensorEntry {
        name: "config.aggregate".to_string(),
        shape: vec![model.aggregate.len()],
        data: model
            .aggregate
            .iter()
            .map(|b| S::of_usize(b.code() as usize))
            .collect(),
    });
    model.visit_params(&mut |name, t| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    });
    model.visit_buffers(&mut |name, b| {
        let data = b.borrow().clone();
        entries.push(TensorEntry {
            name,
            shape: vec![data.len()],
            data,
        });
    });
    entries
}

pub fn model_checkpoint_bytes<S: Scalar>(model: &mut SegModel<S>) -> Vec<u8> {
    checkpoint_bytes(&model_entries(model))
}

pub fn save_model<S: Scalar>(path: &Path, model: &mut SegModel<S>) -> Result<()> {
    std::fs::write(path, model_checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

/// Rebuilds a model from checkpoint entries: the config pseudo-tensors fix
/// the architecture, then every parameter and buffer is filled by name.
pub fn model_from_entries<S: Scalar>(entries: Vec<TensorEntry<S>>) -> Result<SegModel<S>> {
    let mut map: std::collections::HashMap<String, TensorEntry<S>> = entries
        .into_iter()
        .map(|e| (e.name.clone(), e))
        .collect();

    let take = |map: &mut std::collections::HashMap<String, TensorEntry<S>>,
                name: &str|
     -> Result<TensorEntry<S>> {
        map.remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };

    let num_classes = take(&mut map, "config.num_classes")?.data[0].as_f64() as usize;
    let aggregate: Vec<Block> = take(&mut map, "config.aggregate")?
        .data
        .iter()
        .map(|v| {
            Block::from_code(v.as_f64() as u8)
                .ok_or_else(|| Error::Checkpoint(format!("bad block code {v}")))
        })
        .collect::<Result<_>>()?;
    let cfg = ModelConfig::with_aggregate(num_classes, aggregate)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;

    // Skeleton weights are immediately overwritten; the seed is irrelevant.
    let mut rng = seeded_rng(0, 0);
    let mut model = SegModel::init(&mut rng, &cfg);

    let mut fill_err = None;
    model.visit_params(&mut |name, t| {
        if fill_err.is_some() {
            return;
        }
        match map.remove(&name) {
            Some(e) if e.shape == t.shape() => {
                *t = Tensor::from_vec(e.shape, e.data).expect("validated shape");
            }
            Some(e) => {
                fill_err = Some(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    e.shape,
                    t.shape()
                )));
            }
            None => fill_err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    model.visit_buffers(&mut |name, b| {
        if fill_err.is_some() {
            return;
        }
        match map.remove(&name) {
            Some(e) if e.data.len() == b.borrow().len() => *b.borrow_mut() = e.data,
            Some(e) => {
                fill_err = Some(Error::Checkpoint(format!(
                    "buffer {name} has {} values, model expects {}",
                    e.data.len(),
                    b.borrow().len()
                )));
            }
            None => fill_err = Some(Error::Checkpoint(format!("missing buffer {name}"))),
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    if let Some(name) = map.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(model)
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<SegModel<S>> {
    model_from_entries(load_checkpoint(path)?)
}
