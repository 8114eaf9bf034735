//! Run manifests: every produced file with its SHA-256, plus the effective config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const MANIFEST_FORMAT: &str = "homog-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailedRow {
    pub file: String,
    /// Zero-based data row.
    pub row: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub tool_version: String,
    pub kind: String,
    pub rng: String,
    pub config: ExperimentConfig,
    pub threads: usize,
    pub files: Vec<FileEntry>,
    pub failed_rows: Vec<FailedRow>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::Manifest(format!(
                "unsupported format `{}`",
                m.format
            )));
        }
        Ok(m)
    }

    pub fn file_path(&self, manifest: &Path, entry: &FileEntry) -> PathBuf {
        manifest
            .parent()
            .unwrap_or(Path::new("."))
            .join(&entry.path)
    }

    /// Re-hashes every listed file; returns the entries whose content changed.
    pub fn verify(&self, manifest: &Path) -> Result<Vec<String>, CliError> {
        let mut changed = Vec::new();
        for f in &self.files {
            let p = self.file_path(manifest, f);
            let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            if sha256_hex(&bytes) != f.sha256 {
                changed.push(f.path.clone());
            }
        }
        Ok(changed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
