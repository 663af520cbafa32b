//! Provenance record attached to every artifact the tool writes.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Every resolved flag, defaults included.
    pub config: Value,
    pub tool_version: String,
    pub inputs: Vec<InputDigest>,
    /// The only field that differs between otherwise identical runs.
    pub created_unix_s: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: Value) -> Self {
        Self {
            command: command.into(),
            config,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            inputs: Vec::new(),
            created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn add_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(bytes)) });
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("manifest is plain data")
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest is plain data") + "\n"
    }
}

/// `<artifact>.manifest.json` next to the artifact.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}
