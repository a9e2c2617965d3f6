//! Self-describing binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header (config, tensor table, metadata), then every tensor as raw
//! little-endian `f32` in table order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Group;

use super::{ModelConfig, Recognizer};

const MAGIC: &[u8; 8] = b"LADAPTCK";
pub const FORMAT_VERSION: u32 = 1;

/// Free-form provenance stored alongside the weights.
pub type CheckpointMeta = BTreeMap<String, String>;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

pub fn write_checkpoint<W: Write>(model: &Recognizer, meta: &CheckpointMeta, mut w: W) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors: model
            .params()
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), group: p.group, shape: p.shape.clone() })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::new();
    for p in model.params() {
        buf.clear();
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Recognizer, CheckpointMeta)> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| bad(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|e| bad(format!("truncated header: {e}")))?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| bad(format!("truncated header: {e}")))?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|e| bad(format!("truncated header: {e}")))?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut model = Recognizer::new(header.config, 0)?;
    let params = model.params_mut();
    if params.len() != header.tensors.len() {
        return Err(bad(format!("{} tensors stored, model has {}", header.tensors.len(), params.len())));
    }
    for (p, entry) in params.into_iter().zip(&header.tensors) {
        if p.name != entry.name || p.shape != entry.shape || p.group != entry.group {
            return Err(bad(format!("tensor {} does not match model layout ({})", entry.name, p.name)));
        }
        let mut raw = vec![0u8; p.len() * 4];
        r.read_exact(&mut raw).map_err(|e| bad(format!("truncated tensor {}: {e}", entry.name)))?;
        for (v, b) in p.value.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after last tensor".into()));
    }
    Ok((model, header.meta))
}

pub fn save_checkpoint(model: &Recognizer, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, meta, &mut w)?;
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Recognizer, CheckpointMeta)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
