//! Run manifests: enough to re-run the pipeline byte-identically and to
//! verify artifacts by digest. Wall-clock timings go to a sidecar file so
//! manifests from identical configs compare byte-for-byte.

use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Output files relative to the run directory, with sha256 digests.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    /// Input asset digests keyed by label.
    pub inputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        RunManifest {
            config_hash: config_hash.into(),
            tool_version: TOOL_VERSION.into(),
            inputs: BTreeMap::new(),
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::json("serializing manifest", e))?;
        std::fs::write(path, text)
            .map_err(|e| CoreError::io(format!("writing manifest {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(format!("reading manifest {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::json("parsing manifest", e))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| CoreError::io(format!("hashing {}", path.display()), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(crate::nn::vocab::hex(&hasher.finalize()))
}

/// Digests a file or every regular file under a directory (sorted paths).
pub fn digest_outputs(run_dir: &Path, rel_paths: &[String]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for rel in rel_paths {
        let path = run_dir.join(rel);
        if path.is_dir() {
            let mut files: Vec<_> = std::fs::read_dir(&path)
                .map_err(|e| CoreError::io(format!("listing {}", path.display()), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                let rel_file = f
                    .strip_prefix(run_dir)
                    .unwrap_or(&f)
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel_file, sha256_file(&f)?);
            }
        } else {
            out.insert(rel.clone(), sha256_file(&path)?);
        }
    }
    Ok(out)
}

/// Timings sidecar (seconds per stage); volatile, so kept out of the
/// manifest proper.
pub fn save_timings(timings: &BTreeMap<String, f64>, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(timings)
        .map_err(|e| CoreError::json("serializing timings", e))?;
    std::fs::write(path, text)
        .map_err(|e| CoreError::io(format!("writing timings {}", path.display()), e))
}
