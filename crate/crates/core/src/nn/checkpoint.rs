//! `MVXC` | version u32 LE | header length u32 LE | JSON header |
//! f32 LE tensors in header order | CRC32 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVXC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(model: &Model<f32>) -> Vec<u8> {
    let names = model.param_names().into_iter().chain(model.buffer_names());
    let tensors: Vec<&[f32]> = model.params().into_iter().chain(model.buffers()).collect();
    let header = Header {
        config: model.config.clone(),
        tensors: names
            .zip(&tensors)
            .map(|(name, t)| TensorEntry { name, len: t.len() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * tensors.iter().map(|t| t.len()).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Hex SHA-256 of the checkpoint encoding.
pub fn checkpoint_digest(model: &Model<f32>) -> String {
    hex::encode(Sha256::digest(checkpoint_bytes(model)))
}

fn u32_at(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))
}

pub fn model_from_bytes(b: &[u8]) -> Result<Model<f32>> {
    if b.len() < 4 || &b[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32_at(b, 4)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if b.len() < 16 {
        return Err(Error::CorruptCheckpoint("truncated".into()));
    }
    let (body, tail) = b.split_at(b.len() - 4);
    if crc32fast::hash(body) != u32_at(tail, 0)? {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let hlen = u32_at(body, 8)? as usize;
    let json = body
        .get(12..12 + hlen)
        .ok_or_else(|| Error::CorruptCheckpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let mut model = Model::<f32>::new(header.config)?;
    let expected: Vec<String> = model.param_names().into_iter().chain(model.buffer_names()).collect();
    let declared: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
    if declared != expected {
        return Err(Error::CorruptCheckpoint("tensor list does not match config".into()));
    }
    let mut payload = &body[12 + hlen..];
    let mut targets = model.params_mut();
    let n_params = targets.len();
    for (entry, dst) in header.tensors[..n_params].iter().zip(targets.iter_mut()) {
        read_tensor(&mut payload, entry, dst)?;
    }
    drop(targets);
    for (entry, dst) in header.tensors[n_params..].iter().zip(model.buffers_mut()) {
        read_tensor(&mut payload, entry, dst)?;
    }
    if !payload.is_empty() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(model)
}

fn read_tensor(payload: &mut &[u8], entry: &TensorEntry, dst: &mut Vec<f32>) -> Result<()> {
    if entry.len != dst.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{}: {} values, config implies {}",
            entry.name,
            entry.len,
            dst.len()
        )));
    }
    let bytes = payload
        .get(..4 * entry.len)
        .ok_or_else(|| Error::CorruptCheckpoint(format!("{} truncated", entry.name)))?;
    for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
        *d = f32::from_le_bytes(c.try_into().expect("4 bytes"));
    }
    *payload = &payload[4 * entry.len..];
    Ok(())
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let b = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&b)
}
