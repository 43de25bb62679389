//! TOML run configuration: dataset location and shape, split fraction,
//! output directory, and the full training hyperparameter block.
//!
//! A config file is the unit of reproducibility — rerunning `train` on the
//! same file and data produces identical artifacts. Unknown keys are
//! rejected so typos cannot silently fall back to defaults.

use crate::error::{Error, Result};
use crate::optim::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

fn default_train_frac() -> f64 {
    0.8
}

fn default_output_dir() -> String {
    "out".into()
}

/// Contents of a run configuration file.
///
/// ```toml
/// data = "data.csv"
/// num_modes = 2
/// train_frac = 0.8        # optional, default 0.8
/// output_dir = "out"      # optional, default "out"
///
/// [train]                 # optional, defaults per TrainConfig
/// rank = 3
/// epochs = 500
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// Path of the observation CSV, absolute or relative to the working
    /// directory (not to the config file).
    pub data: String,
    /// Number of tensor modes; the CSV header must carry this many index
    /// columns.
    pub num_modes: usize,
    /// Fraction of observations assigned to the training split.
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    /// Directory receiving the checkpoint and history CSV.
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Training hyperparameters; omitted keys take their defaults.
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfigFile {
    /// Parses and validates a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfigFile = toml::from_str(&text).map_err(|e| {
            Error::Usage(format!("config {}: {}", path.display(), e.message()))
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Checks the invariants that TOML syntax cannot express.
    pub fn validate(&self) -> Result<()> {
        if self.data.is_empty() {
            return Err(Error::Usage("config: `data` path is empty".into()));
        }
        if self.num_modes == 0 {
            return Err(Error::Usage(
                "config: `num_modes` must be at least 1".into(),
            ));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Usage(format!(
                "config: `train_frac` must lie strictly between 0 and 1, got {}",
                self.train_frac
            )));
        }
        if self.output_dir.is_empty() {
            return Err(Error::Usage("config: `output_dir` is empty".into()));
        }
        self.train.validate()
    }
}
