//! Atomic artifact writes and the run manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentConfig, ExperimentError, Result, StepLog};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `bytes` to a synced sibling temp file and rename it over `path`,
/// creating parent directories as needed.
pub fn write_artifact(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| ExperimentError::Io(format!("{}: {e}", path.display()));
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io)?;
    let name = path
        .file_name()
        .ok_or_else(|| ExperimentError::Io(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Everything needed to reproduce and audit one command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    /// Crate version plus the source revision when one is known.
    pub source: String,
    pub wall_clock_secs: f64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Digest of every stored triplet, in step order.
    pub triplet_digests: Vec<String>,
    /// Per-step stage choices and loss curves of a training run.
    pub training: Vec<StepLog>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        let json = serde_json::to_vec(config).expect("config serializes");
        Self {
            command: command.to_string(),
            seed: config.seed,
            config: config.clone(),
            config_sha256: sha256_hex(&json),
            source: format!("owcod-core {}", env!("CARGO_PKG_VERSION")),
            wall_clock_secs: 0.0,
            inputs: Vec::new(),
            outputs: Vec::new(),
            triplet_digests: Vec::new(),
            training: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_artifact(path, &json)
    }
}
