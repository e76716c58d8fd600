//! Single-file checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "CGCKPT\0\0"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H in bytes, u64 little-endian
//! 20      H     UTF-8 JSON header: version, config, stage, seed, step,
//!               and the ordered [{name, shape}] table
//! 20+H    ...   every array in header order, f64 little-endian, row-major
//! ```
//!
//! The file must end exactly after the last array.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, NamedTensor, ParameterStore, StageTag};
use super::ModelError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CGCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    stage: StageTag,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<(), ModelError> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: store.config,
        stage: store.stage,
        seed: store.seed,
        step: store.step,
        tensors: store
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::IoFailure(e.to_string()))?;
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * store.num_scalars());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in &store.tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ModelError::IoFailure(e.to_string()))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &buf).map_err(|e| ModelError::IoFailure(e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| ModelError::IoFailure(e.to_string()))
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], ModelError> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ModelError::IoFailure("checkpoint is truncated".into()))?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::IoFailure(e.to_string()))?;
    let mut pos = 0;
    if take(&bytes, &mut pos, 8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::IoFailure("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().unwrap());
    let header_len = usize::try_from(header_len)
        .map_err(|_| ModelError::IoFailure("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(&bytes, &mut pos, header_len)?)
        .map_err(|e| ModelError::IoFailure(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(&bytes, &mut pos, n.checked_mul(8).unwrap_or(usize::MAX))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor {
            name: entry.name,
            shape: entry.shape,
            data,
        });
    }
    if pos != bytes.len() {
        return Err(ModelError::IoFailure("trailing bytes after last array".into()));
    }
    let store = ParameterStore {
        config: header.config,
        stage: header.stage,
        seed: header.seed,
        step: header.step,
        tensors,
    };
    store.check_shapes(&store.config)?;
    Ok(store)
}

/// Loads a checkpoint and checks it against the architecture in `expected`.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<ParameterStore, ModelError> {
    let store = load_checkpoint(path)?;
    store.check_shapes(expected)?;
    Ok(store)
}
