//! Per-command run manifests. They hold no timestamps or absolute paths, so
//! repeating a run reproduces the manifest byte for byte.

use crate::error::CliError;
use fst_core::config::{ExperimentConfig, SeedsSection};
use fst_core::container::write_atomic;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const VERSION: &str = env!("FST_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    /// Distinguishes runs of one command that share an output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub version: String,
    pub config_hash: String,
    pub outputs: Vec<String>,
    pub seeds: SeedsSection,
    pub inputs: BTreeMap<String, InputFile>,
    pub summary: BTreeMap<String, f64>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            tag: None,
            version: VERSION.into(),
            config_hash: config.hash(),
            outputs: Vec::new(),
            seeds: config.seeds.clone(),
            inputs: BTreeMap::new(),
            summary: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn tagged(mut self, tag: &str) -> Self {
        self.tag = Some(tag.into());
        self
    }

    /// `manifest.<command>.toml`, or `manifest.<command>.<tag>.toml`.
    pub fn file_name(&self) -> String {
        match &self.tag {
            Some(tag) => format!("manifest.{}.{tag}.toml", self.command),
            None => format!("manifest.{}.toml", self.command),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("i/o error on {}: {e}", path.display())))?;
        let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        let file = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.inputs.insert(role.into(), InputFile { file, sha256 });
        Ok(())
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn summary(&mut self, key: &str, value: f64) {
        self.summary.insert(key.into(), value);
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Io(format!("i/o error: cannot render manifest: {e}")))?;
        write_atomic(&dir.join(self.file_name()), text.as_bytes())?;
        Ok(())
    }
}
