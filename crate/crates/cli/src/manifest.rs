//! Per-step provenance manifests. Every command writes a `manifest.json`
//! into its step directory recording the parameters it ran with and a
//! sha256 of every file it read and wrote. No timestamps, sorted keys:
//! identical inputs and flags produce byte-identical manifests.

use serde::Serialize;
use sha2::{Digest, Sha256};
use standseg_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Serialize)]
struct InputStamp {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    command: String,
    parameters: BTreeMap<String, serde_json::Value>,
    inputs: BTreeMap<String, InputStamp>,
    outputs: BTreeMap<String, String>,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            parameters: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn param<V: Serialize>(&mut self, key: &str, value: V) -> Result<()> {
        let value = serde_json::to_value(value)
            .map_err(|e| Error::Encoding(format!("manifest param {key}: {e}")))?;
        self.parameters.insert(key.to_string(), value);
        Ok(())
    }

    /// Record an input file under a logical name, hashing its content.
    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(
            name.to_string(),
            InputStamp { path: path.display().to_string(), sha256: hash_file(path)? },
        );
        Ok(())
    }

    /// Record an output file keyed by its path relative to the step dir.
    pub fn output(&mut self, step_dir: &Path, path: &Path) -> Result<()> {
        let key = path
            .strip_prefix(step_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        self.outputs.insert(key, hash_file(path)?);
        Ok(())
    }

    pub fn write(&self, step_dir: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Encoding(format!("manifest: {e}")))?;
        std::fs::write(step_dir.join("manifest.json"), body + "\n")?;
        Ok(())
    }
}
