//! Run manifest: what was run, with which configuration and seeds, and which
//! files it produced.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::HarnessError;

pub const MANIFEST_FILE: &str = "run_manifest.toml";
pub const TIMINGS_FILE: &str = "timings.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub format: String,
    pub command: String,
    pub config_source: String,
    pub master_seed: u64,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    /// Reproducible artifacts.
    pub artifacts: Vec<String>,
    /// Files that vary between runs (wall-clock timings).
    pub nondeterministic: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: RunInfo,
    /// Every derived seed, keyed by what it drives.
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub outputs: Outputs,
    /// Effective configuration after command-line overrides.
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn new(command: &str, config_source: &str, config: &ExperimentConfig) -> Self {
        Self {
            run: RunInfo {
                format: "mtdgrid-run 1".into(),
                command: command.into(),
                config_source: config_source.into(),
                master_seed: config.run.seed,
                code_version: env!("CARGO_PKG_VERSION").into(),
            },
            seeds: Default::default(),
            outputs: Outputs { artifacts: Vec::new(), nondeterministic: Vec::new() },
            config: config.clone(),
        }
    }

    pub fn to_text(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Io { path: MANIFEST_FILE.into(), msg: e.to_string() })
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Io { path: MANIFEST_FILE.into(), msg: e.to_string() })
    }

    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        write_file(&dir.join(MANIFEST_FILE), &self.to_text()?)
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::Io { path: parent.display().to_string(), msg: e.to_string() })?;
    }
    std::fs::write(path, contents).map_err(|e| HarnessError::Io { path: path.display().to_string(), msg: e.to_string() })
}
