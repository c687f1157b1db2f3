//! One JSON manifest per run, with SHA-256 hashes of every artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<Artifact>,
    pub duration_secs: f64,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: Option<u64>, inputs: Vec<PathBuf>) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            seed,
            inputs,
            outputs: Vec::new(),
            duration_secs: 0.0,
        }
    }

    pub fn add_output(&mut self, path: &Path) -> std::io::Result<()> {
        let sha256 = sha256_file(path)?;
        self.outputs.push(Artifact { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    pub fn write(mut self, path: &Path, elapsed: Duration) -> anyhow::Result<()> {
        self.duration_secs = elapsed.as_secs_f64();
        fs::write(path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(())
    }
}
