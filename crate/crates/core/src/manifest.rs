//! Reproducibility envelope written next to every output file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::JsonlError;
use crate::seed::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_snapshot: serde_json::Value,
    /// Input path (as given) to SHA-256 of its contents.
    pub input_digests: BTreeMap<String, String>,
    pub seed: u64,
    pub tool_version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, config_snapshot: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_snapshot,
            input_digests: BTreeMap::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), JsonlError> {
        let bytes = std::fs::read(path)
            .map_err(|source| JsonlError::Io { path: path.display().to_string(), source })?;
        self.input_digests.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Re-hashes every input and lists those whose digest changed or which
    /// can no longer be read.
    pub fn stale_inputs(&self) -> Vec<String> {
        self.input_digests
            .iter()
            .filter(|(path, digest)| std::fs::read(path).map(|b| sha256_hex(&b) != **digest).unwrap_or(true))
            .map(|(p, _)| p.clone())
            .collect()
    }
}

/// `<output>.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn write_manifest(output: &Path, manifest: &RunManifest) -> Result<(), JsonlError> {
    crate::io::write_json(&manifest_path(output), manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_digests_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.jsonl");
        std::fs::write(&input, "{}\n").unwrap();
        let mut m = RunManifest::new("build", serde_json::json!({"cap": 3}), 7);
        m.add_input(&input).unwrap();
        assert!(m.stale_inputs().is_empty());
        std::fs::write(&input, "{}\n{}\n").unwrap();
        assert_eq!(m.stale_inputs().len(), 1);

        let out = dir.path().join("dataset.jsonl");
        write_manifest(&out, &m).unwrap();
        let back: RunManifest = crate::io::read_json(&dir.path().join("dataset.jsonl.manifest.json")).unwrap();
        assert_eq!(back, m);
        assert!(m.add_input(&dir.path().join("missing")).is_err());
    }
}
