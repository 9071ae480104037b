use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PROVENANCE_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

/// Resolved parameters and produced files of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub status: String,
    pub parameters: serde_json::Value,
    pub outputs: Vec<OutputRecord>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, parameters: serde_json::Value) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            status: "ok".into(),
            parameters,
            outputs: Vec::new(),
        }
    }

    /// Hashes `files` (relative to `dir`) and writes `run.json` there.
    pub fn write(mut self, dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
        for f in files {
            let full = dir.join(f);
            let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
            self.outputs.push(OutputRecord {
                path: f.to_string_lossy().replace('\\', "/"),
                sha256: format!("{:x}", Sha256::digest(&bytes)),
            });
        }
        let path = dir.join(PROVENANCE_FILE);
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(PROVENANCE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "abc").unwrap();
        let m = RunManifest::new("bench", 3, serde_json::json!({"reps": 1}));
        m.write(dir.path(), &["a.txt".into()]).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back.seed, 3);
        assert_eq!(
            back.outputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
