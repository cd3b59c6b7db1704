//! Run directories: the manifest written before work starts and finalized
//! when it ends.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: Option<f64>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub artifacts: Vec<PathBuf>,
    /// Checkpoint file and its git-style SHA-256 blob hash.
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_sha256: Option<String>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// SHA-256 of `"blob <len>\0" ‖ bytes`, hex encoded.
pub fn git_blob_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    /// Creates the manifest and writes it to `dir` immediately.
    pub fn begin(dir: &Path, command: &str, config: serde_json::Value, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let m = Self {
            command: command.into(),
            config,
            seed,
            started: now(),
            finished: None,
            status: RunStatus::Running,
            error: None,
            artifacts: Vec::new(),
            checkpoint: None,
            checkpoint_sha256: None,
        };
        m.write(dir)?;
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }

    /// Records the outcome, the artifacts under `dir` that exist, and the hash
    /// of `checkpoint` if given.
    pub fn finish(
        &mut self,
        dir: &Path,
        outcome: std::result::Result<(), String>,
        artifacts: &[&str],
        checkpoint: Option<&str>,
    ) -> Result<()> {
        self.finished = Some(now());
        match outcome {
            Ok(()) => self.status = RunStatus::Completed,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e);
            }
        }
        self.artifacts = artifacts
            .iter()
            .map(|a| dir.join(a))
            .filter(|p| p.exists())
            .collect();
        if let Some(c) = checkpoint {
            let p = dir.join(c);
            if p.exists() {
                self.checkpoint_sha256 = Some(git_blob_sha256(&fs::read(&p)?));
                self.checkpoint = Some(p);
            }
        }
        self.write(dir)
    }
}
