use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// What produced a set of result files. `digest` covers everything except
/// the timestamps, so reruns of the same inputs share it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub digest: String,
    pub command: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config_digest: String, seeds: Vec<u64>, inputs: Vec<(String, String)>) -> Self {
        let code_version = env!("CARGO_PKG_VERSION").to_string();
        let mut h = Sha256::new();
        for part in [command, &config_digest, &code_version] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        for s in &seeds {
            h.update(s.to_le_bytes());
        }
        for (k, v) in &inputs {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([0]);
        }
        Self {
            digest: hex::encode(h.finalize()),
            command: command.to_string(),
            config_digest,
            seeds,
            code_version,
            inputs,
            outputs: Vec::new(),
            started_unix: now_unix(),
            finished_unix: 0,
        }
    }

    pub fn write(&mut self, dir: &Path) -> std::io::Result<PathBuf> {
        self.finished_unix = now_unix();
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self).map_err(std::io::Error::other)? + "\n")?;
        Ok(path)
    }
}
