//! Run manifests: what a command read, wrote and was configured with.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub engine_version: String,
    pub config_hash: String,
    pub schema_hash: String,
    pub seed: u64,
    pub variant: String,
    pub started_at: u64,
    pub finished_at: u64,
    /// Inputs by role, e.g. `dataset` or `checkpoint`.
    pub inputs: BTreeMap<String, PathBuf>,
    /// Produced files by role.
    pub artifacts: BTreeMap<String, Artifact>,
    pub config: Config,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config: &Config) -> Self {
        Self {
            command: command.to_string(),
            engine_version: ENGINE_VERSION.to_string(),
            config_hash: config.hash(),
            schema_hash: config.schema_hash(),
            seed: config.training.seed,
            variant: config.variant.arch.to_string(),
            started_at: unix_now(),
            finished_at: 0,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn input(&mut self, role: &str, path: impl Into<PathBuf>) {
        self.inputs.insert(role.to_string(), path.into());
    }

    pub fn artifact(&mut self, role: &str, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let sha256 = file_sha256(path)?;
        self.artifacts.insert(
            role.to_string(),
            Artifact {
                path: path.to_path_buf(),
                sha256,
            },
        );
        Ok(())
    }

    pub fn finish(&mut self) {
        self.finished_at = unix_now();
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Recomputes the config hash and every artifact digest.
    pub fn verify(&self) -> Result<()> {
        if self.config.hash() != self.config_hash {
            return Err(Error::SchemaMismatch {
                expected: self.config.hash(),
                found: self.config_hash.clone(),
                fields: vec!["config_hash".into()],
            });
        }
        for (role, a) in &self.artifacts {
            let now = file_sha256(&a.path)?;
            if now != a.sha256 {
                return Err(Error::validation(
                    role.clone(),
                    format!(
                        "{} changed since the run ({} vs {})",
                        a.path.display(),
                        now,
                        a.sha256
                    ),
                ));
            }
        }
        Ok(())
    }
}
