//! Run manifests: what ran, with which settings, and the hash of every
//! file it read or wrote.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io_error, CliError};

pub const MANIFEST_FORMAT: &str = "mupod-manifest-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn hash(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, with `--config` removed; the
    /// resolved configuration is stored in `config` instead.
    pub args: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::usage(format!(
                "{}: manifest format {:?}, expected {MANIFEST_FORMAT:?}",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::runtime(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| io_error(path, e))
    }

    /// Outputs whose current hash differs from the recorded one.
    pub fn changed_outputs(&self) -> Result<Vec<PathBuf>, CliError> {
        let mut changed = Vec::new();
        for a in &self.outputs {
            if Artifact::hash(&a.path)?.sha256 != a.sha256 {
                changed.push(a.path.clone());
            }
        }
        Ok(changed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            Artifact::hash(&p).unwrap().sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
