//! Run manifest: a JSON snapshot of what a command ran with and what it
//! produced, written next to the outputs so a rerun can be reproduced.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// Fully resolved configuration or arguments of the run.
    pub config: Value,
    /// Paths of produced artifacts, relative to the manifest location.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Value, artifacts: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            artifacts,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text)
            .with_context(|| format!("cannot write manifest {}", path.display()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_is_valid_json_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new(
            "train",
            42,
            serde_json::json!({"epochs": 3}),
            vec!["checkpoint.bin".into(), "metrics.jsonl".into()],
        );
        m.save(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.command, "train");
        assert_eq!(back.seed, 42);
        assert_eq!(back.artifacts.len(), 2);
    }
}
