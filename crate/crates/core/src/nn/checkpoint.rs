//! Checkpoint IO: a binary parameter blob plus a JSON sidecar carrying the
//! config hash, seed and vocabulary manifest.

use super::params::{ParamId, ParamSet, Tensor};
use super::vocab::Vocab;
use crate::scalar::Scalar;
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"KBARBCKP";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub vocab_digest: String,
    pub vocab_tokens: Vec<String>,
    pub vocab_tags: Vec<String>,
    pub dims: serde_json::Value,
}

impl CheckpointMeta {
    pub fn vocab(&self) -> Vocab {
        Vocab::from_lists(self.vocab_tokens.clone(), self.vocab_tags.clone())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the parameter blob and its sidecar. Values are stored as little
/// endian f64 regardless of the in-memory scalar.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    params: &ParamSet<S>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        match tensor {
            Tensor::V(v) => {
                buf.push(1);
                buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
                for x in v.iter() {
                    buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
                }
            }
            Tensor::M(m) => {
                buf.push(2);
                buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
                buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
                for x in m.iter() {
                    buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
                }
            }
        }
    }
    std::fs::write(path, &buf)
        .map_err(|e| CoreError::io(format!("writing checkpoint {}", path.display()), e))?;
    let sidecar = serde_json::to_string_pretty(meta)
        .map_err(|e| CoreError::json("serializing checkpoint sidecar", e))?;
    std::fs::write(sidecar_path(path), sidecar)
        .map_err(|e| CoreError::io("writing checkpoint sidecar".to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let sidecar = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar)
        .map_err(|e| CoreError::io(format!("reading checkpoint sidecar {}", sidecar.display()), e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::json("parsing checkpoint sidecar", e))
}

/// Fills an already-constructed parameter set from the blob, matching
/// tensors by name and verifying shapes.
pub fn load_checkpoint_params<S: Scalar>(path: &Path, params: &mut ParamSet<S>) -> Result<()> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| CoreError::io(format!("opening checkpoint {}", path.display()), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| CoreError::io("reading checkpoint".to_string(), e))?;
    let mut at = 0usize;
    let take = |buf: &[u8], at: &mut usize, n: usize| -> Result<Vec<u8>> {
        if *at + n > buf.len() {
            return Err(CoreError::Checkpoint("truncated blob".into()));
        }
        let out = buf[*at..*at + n].to_vec();
        *at += n;
        Ok(out)
    };
    if take(&buf, &mut at, 8)? != MAGIC {
        return Err(CoreError::Checkpoint("bad magic".into()));
    }
    let n = u32::from_le_bytes(take(&buf, &mut at, 4)?.try_into().unwrap()) as usize;
    if n != params.len() {
        return Err(CoreError::Checkpoint(format!(
            "tensor count mismatch: blob has {n}, model expects {}",
            params.len()
        )));
    }
    for _ in 0..n {
        let name_len = u16::from_le_bytes(take(&buf, &mut at, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&buf, &mut at, name_len)?)
            .map_err(|_| CoreError::Checkpoint("non-utf8 tensor name".into()))?;
        let id: ParamId = params
            .id_by_name(&name)
            .ok_or_else(|| CoreError::Checkpoint(format!("unknown tensor `{name}`")))?;
        let ndim = take(&buf, &mut at, 1)?[0];
        match (ndim, params.tensor_mut(id)) {
            (1, Tensor::V(v)) => {
                let len = u32::from_le_bytes(take(&buf, &mut at, 4)?.try_into().unwrap()) as usize;
                if len != v.len() {
                    return Err(CoreError::Checkpoint(format!("shape mismatch for `{name}`")));
                }
                for x in v.iter_mut() {
                    let raw = take(&buf, &mut at, 8)?;
                    *x = S::from_f64_lossy(f64::from_le_bytes(raw.try_into().unwrap()));
                }
            }
            (2, Tensor::M(m)) => {
                let rows = u32::from_le_bytes(take(&buf, &mut at, 4)?.try_into().unwrap()) as usize;
                let cols = u32::from_le_bytes(take(&buf, &mut at, 4)?.try_into().unwrap()) as usize;
                if (rows, cols) != m.dim() {
                    return Err(CoreError::Checkpoint(format!("shape mismatch for `{name}`")));
                }
                for x in m.iter_mut() {
                    let raw = take(&buf, &mut at, 8)?;
                    *x = S::from_f64_lossy(f64::from_le_bytes(raw.try_into().unwrap()));
                }
            }
            _ => {
                return Err(CoreError::Checkpoint(format!(
                    "rank mismatch for `{name}`"
                )))
            }
        }
    }
    Ok(())
}
