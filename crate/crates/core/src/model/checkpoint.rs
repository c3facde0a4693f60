//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                         |
//! |------------------|-------------------------------------------------|
//! | 8                | magic `COOPGEN\0`                               |
//! | 4                | format version (`u32`)                          |
//! | 4                | header length `h` (`u32`)                       |
//! | h                | JSON header: model config plus [`ModelMeta`]    |
//! | 8                | parameter count `n` (`u64`)                     |
//! | 4·n              | parameters as `f32`, in [`ModelParams::slices`] order |
//! | 4                | CRC-32 of every byte from the version through the parameters |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, Transformer};
use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 8] = b"COOPGEN\0";
pub const FORMAT_VERSION: u32 = 1;

/// What a checkpoint was trained as, plus what is needed to use it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// Role name such as `lm`, `disc_bi`, `cclm`.
    pub kind: String,
    /// Non-special vocabulary characters in id order.
    pub vocab: String,
    /// Extra ids appended after the vocabulary (class-conditional LMs).
    pub num_control_tokens: usize,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    config: ModelConfig,
    meta: ModelMeta,
}

pub fn save_checkpoint(model: &Transformer, meta: &ModelMeta, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&FileHeader {
        config: model.config,
        meta: meta.clone(),
    })?;
    let n = model.params.num_params();
    let mut buf = Vec::with_capacity(8 + 4 + 4 + header.len() + 8 + 4 * n + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for slice in model.params.slices() {
        for &v in slice {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[MAGIC.len()..]);
    buf.extend_from_slice(&crc.to_le_bytes());

    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Transformer, ModelMeta)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Configuration(format!("checkpoint not found: {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    decode(&bytes).map_err(|kind| Error::Checkpoint {
        path: path.to_path_buf(),
        kind,
    })
}

fn decode(bytes: &[u8]) -> Result<(Transformer, ModelMeta), CheckpointError> {
    use CheckpointError::*;
    let u32_at = |off: usize| -> Result<u32, CheckpointError> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or(Truncated)
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(BadMagic);
    }
    let version = u32_at(8)?;
    if version != FORMAT_VERSION {
        return Err(Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u32_at(12)? as usize;
    let header_end = 16 + header_len;
    let count_bytes = bytes.get(header_end..header_end + 8).ok_or(Truncated)?;
    let count = u64::from_le_bytes(count_bytes.try_into().unwrap()) as usize;
    let params_start = header_end + 8;
    let params_end = count
        .checked_mul(4)
        .and_then(|b| b.checked_add(params_start))
        .ok_or(Truncated)?;
    if bytes.len() < params_end + 4 {
        return Err(Truncated);
    }
    if bytes.len() > params_end + 4 {
        return Err(Header("trailing bytes after checksum".into()));
    }
    let stored = u32_at(params_end)?;
    let computed = crc32fast::hash(&bytes[MAGIC.len()..params_end]);
    if stored != computed {
        return Err(Checksum { stored, computed });
    }

    let header: FileHeader =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Header(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| Header(e.to_string()))?;
    let mut params = ModelParams::zeros(&header.config);
    if params.num_params() != count {
        return Err(Header(format!(
            "config implies {} parameters, file holds {count}",
            params.num_params()
        )));
    }
    let mut values = bytes[params_start..params_end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
    for slice in params.slices_mut() {
        for v in slice.iter_mut() {
            *v = values.next().unwrap();
        }
    }
    Ok((
        Transformer {
            config: header.config,
            params,
        },
        header.meta,
    ))
}
