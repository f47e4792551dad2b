use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Written as `manifest.json` next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<InputFile>,
    /// Hash over the input file hashes and the effective flags.
    pub config_hash: String,
    pub seed: u64,
    pub flags: Vec<(String, String)>,
    pub tool_version: String,
    pub started_unix: u64,
    pub wall_time_seconds: f64,
}

pub struct ManifestBuilder {
    command: String,
    inputs: Vec<InputFile>,
    flags: Vec<(String, String)>,
    seed: u64,
    started: SystemTime,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            inputs: Vec::new(),
            flags: Vec::new(),
            seed,
            started: SystemTime::now(),
        }
    }

    /// Reads an input file, recording its hash.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push(InputFile {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn flag(&mut self, name: &str, value: impl ToString) {
        self.flags.push((name.into(), value.to_string()));
    }

    pub fn write(self, out: &Path) -> Result<(), CliError> {
        let mut h = Sha256::new();
        for i in &self.inputs {
            h.update(i.sha256.as_bytes());
        }
        for (k, v) in &self.flags {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        let manifest = RunManifest {
            command: self.command,
            config_hash: hex::encode(h.finalize()),
            inputs: self.inputs,
            seed: self.seed,
            flags: self.flags,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: self.started.duration_since(UNIX_EPOCH).unwrap_or(Duration::ZERO).as_secs(),
            wall_time_seconds: self.started.elapsed().unwrap_or(Duration::ZERO).as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(out.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}
