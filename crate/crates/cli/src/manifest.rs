//! Run manifests: enough to reproduce a run (command, config snapshot, seed,
//! code version, input digests) plus wall-clock bounds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use volseg_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub inputs: Vec<InputDigest>,
    pub started_at: String,
    pub finished_at: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl RunManifest {
    /// Digests every input; fails if any input is unreadable.
    pub fn new(command: Vec<String>, config: serde_json::Value, seed: u64, inputs: &[PathBuf]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.clone(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RunManifest {
            command,
            config,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            started_at: now(),
            finished_at: None,
        })
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(now());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// True when every recorded input still has its recorded digest.
    pub fn verify_inputs(&self) -> Result<bool> {
        for i in &self.inputs {
            if sha256_file(&i.path)? != i.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
