//! Per-run manifest: enough to reproduce the command (config snapshot and
//! content hashes of inputs) plus the metrics it produced.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensorslice_core::model::fnv1a64;
use tensorslice_core::{Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub workers: usize,
    /// Content hashes (fnv1a-64, hex) of every input file consumed.
    pub inputs: BTreeMap<String, String>,
    /// Files written by the run, relative to the output directory.
    pub outputs: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    /// Resolved configuration after flag overrides.
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            seed: config.seed,
            workers: config.workers,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.insert(
            path.display().to_string(),
            format!("{:016x}", fnv1a64(&bytes)),
        );
        Ok(())
    }

    pub fn record_output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn record_metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let text = toml::to_string_pretty(self)?;
        std::fs::write(out_dir.join("manifest.toml"), text)?;
        Ok(())
    }

    pub fn load(out_dir: &Path) -> Result<RunManifest> {
        let path = out_dir.join("manifest.toml");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        Ok(toml::from_str(&text)?)
    }
}
