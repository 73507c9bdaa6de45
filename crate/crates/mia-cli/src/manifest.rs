//! Content-addressed stage manifests.
//!
//! Every stage records the digests of the artifacts it read and wrote,
//! plus the digest of the config it ran under. Input digests always
//! equal some earlier stage's output digests, so any artifact can be
//! traced back to the raw corpus bytes. Manifests carry no timestamps
//! or absolute paths; identical inputs produce identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, config_digest: &str) -> Manifest {
        Manifest {
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: config_digest.to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: impl Into<String>, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(name.into(), digest_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, name: impl Into<String>, path: &Path) -> Result<(), CliError> {
        self.outputs.insert(name.into(), digest_file(path)?);
        Ok(())
    }

    /// Writes `<dir>/<stage>.manifest.json` (pretty, trailing newline).
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.manifest.json", self.stage));
        let mut body = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Other(format!("manifest serialization: {e}")))?;
        body.push('\n');
        std::fs::write(&path, body)?;
        Ok(path)
    }
}

pub fn digest_file(path: &Path) -> Result<String, CliError> {
    let hex = mia_core::util::sha256_file(path)
        .map_err(|e| CliError::Other(format!("digest of {}: {e}", path.display())))?;
    Ok(format!("sha256:{hex}"))
}
