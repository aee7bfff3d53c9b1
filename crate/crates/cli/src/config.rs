//! The run configuration document.
//!
//! One TOML document drives every command; command-line flags override the
//! document, which overrides built-in defaults (`flags > document >
//! defaults`). Validation reports every problem it finds, not just the
//! first.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensorslice_core::optim::{LossKind, TrainConfig};
use tensorslice_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub dataset: DatasetConfig,
    pub baseline: TrainSection,
    pub compress: CompressConfig,
    pub profile: ProfileConfig,
    pub slices: SlicesConfig,
    pub local: TrainSection,
    pub global: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            dataset: DatasetConfig::default(),
            baseline: TrainSection {
                epochs: 25,
                batch_size: 16,
                learning_rate: 1e-3,
                data_fraction: 1.0,
                train_all: true,
            },
            compress: CompressConfig::default(),
            profile: ProfileConfig::default(),
            slices: SlicesConfig::default(),
            local: TrainSection {
                epochs: 10,
                batch_size: 8,
                learning_rate: 1e-3,
                data_fraction: 1.0,
                train_all: false,
            },
            global: TrainSection {
                epochs: 5,
                batch_size: 16,
                learning_rate: 5e-4,
                data_fraction: 1.0,
                train_all: false,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// `spirals` (two-class 2D) or `blobs` (four-class 8x8 images).
    pub kind: String,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    /// Generation stream; the test split uses `data_seed + 1_000_000`.
    pub data_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: "spirals".to_string(),
            train_per_class: 500,
            test_per_class: 200,
            noise: 0.08,
            data_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub data_fraction: f64,
    pub train_all: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 5,
            batch_size: 8,
            learning_rate: 1e-3,
            data_fraction: 1.0,
            train_all: false,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64, loss: LossKind) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed,
            loss,
            data_fraction: self.data_fraction,
            train_all: self.train_all,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressConfig {
    pub target_cr: f64,
    /// Interpret `target_cr` as a uniform per-layer weight rate instead of
    /// a whole-model rate.
    pub per_layer: bool,
    pub exclude: Vec<usize>,
}

impl Default for CompressConfig {
    fn default() -> Self {
        CompressConfig {
            target_cr: 0.5,
            per_layer: false,
            exclude: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ProfileConfig {
    /// Layer indices to probe; empty means every tensorizable layer.
    pub candidates: Vec<usize>,
    /// How many of the most sensitive layers `compress` should exclude when
    /// no explicit exclusions are configured.
    pub exclude_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SlicesConfig {
    /// Cut indices defining the slice partition; empty means one slice.
    pub cuts: Vec<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    /// Collects every validation problem.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.workers == 0 {
            problems.push("workers must be >= 1".to_string());
        }
        match self.dataset.kind.as_str() {
            "spirals" | "blobs" => {}
            other => problems.push(format!(
                "dataset.kind must be \"spirals\" or \"blobs\", got \"{other}\""
            )),
        }
        if self.dataset.train_per_class == 0 {
            problems.push("dataset.train_per_class must be >= 1".to_string());
        }
        if self.dataset.test_per_class == 0 {
            problems.push("dataset.test_per_class must be >= 1".to_string());
        }
        if self.dataset.noise < 0.0 {
            problems.push(format!(
                "dataset.noise must be >= 0, got {}",
                self.dataset.noise
            ));
        }
        for (name, section) in [
            ("baseline", &self.baseline),
            ("local", &self.local),
            ("global", &self.global),
        ] {
            if section.batch_size == 0 {
                problems.push(format!("{name}.batch_size must be >= 1"));
            }
            if !(section.learning_rate > 0.0) {
                problems.push(format!(
                    "{name}.learning_rate must be > 0, got {}",
                    section.learning_rate
                ));
            }
            if !(0.0 < section.data_fraction && section.data_fraction <= 1.0) {
                problems.push(format!(
                    "{name}.data_fraction must be in (0, 1], got {}",
                    section.data_fraction
                ));
            }
        }
        if !(0.0 < self.compress.target_cr && self.compress.target_cr < 1.0) {
            problems.push(format!(
                "compress.target_cr must be in (0, 1), got {}",
                self.compress.target_cr
            ));
        }
        let mut prev = 0usize;
        for &cut in &self.slices.cuts {
            if cut <= prev {
                problems.push(format!(
                    "slices.cuts must be strictly increasing and positive, got {:?}",
                    self.slices.cuts
                ));
                break;
            }
            prev = cut;
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("\n")))
        }
    }

    pub fn exclusions(&self) -> BTreeSet<usize> {
        self.compress.exclude.iter().copied().collect()
    }
}
