//! The self-describing record written next to every run's artifacts.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub started_at: f64,
    pub finished_at: Option<f64>,
    pub status: RunStatus,
    pub error: Option<String>,
    /// Artifact paths relative to the manifest's directory.
    pub artifacts: Vec<String>,
    pub config: RunConfig,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.train.seed,
            started_at: unix_now(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
            artifacts: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn finish(&mut self, error: Option<String>) {
        self.finished_at = Some(unix_now());
        self.status = if error.is_some() { RunStatus::Aborted } else { RunStatus::Completed };
        self.error = error;
    }

    /// Replaces `dir/manifest.json` atomically (write to a sibling, then rename).
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}
