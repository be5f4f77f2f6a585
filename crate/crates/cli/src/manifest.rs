//! Per-run record: enough to rerun a command and check that its outputs match.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_SCHEMA: &str = "usg_manifest_v1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    /// Every flag value, defaults included.
    pub args: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub config_hashes: BTreeMap<String, String>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub versions: BTreeMap<String, String>,
    pub wall_clock_s: f64,
    /// Command-specific results (stats, accuracies, success rates).
    pub results: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, args: &impl Serialize) -> Self {
        let versions = BTreeMap::from([
            ("usg".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            (
                "dataset_format".to_string(),
                usg_core::dataset::FORMAT_VERSION.to_string(),
            ),
            (
                "model_format".to_string(),
                usg_core::model::MODEL_FORMAT_VERSION.to_string(),
            ),
        ]);
        Self {
            schema: MANIFEST_SCHEMA.into(),
            command: command.into(),
            args: serde_json::to_value(args).unwrap_or(serde_json::Value::Null),
            seeds: BTreeMap::new(),
            config_hashes: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions,
            wall_clock_s: 0.0,
            results: serde_json::Value::Null,
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn config(&mut self, name: &str, text: &str) -> &mut Self {
        self.config_hashes.insert(name.into(), sha256_hex(text.as_bytes()));
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        self.inputs.push(Artifact::of(path)?);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        self.outputs.push(Artifact::of(path)?);
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
    }
}

/// `<path>.manifest.json` next to the primary output.
pub fn default_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
