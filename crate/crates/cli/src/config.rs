//! TOML experiment files.
//!
//! ```toml
//! [train]
//! seed = 0
//! tau = 0.0007
//! # ... every TrainConfig field
//! [train.data]
//! kind = "circles"
//! [train.arch]
//! embed_dim = 128
//! [train.alpha]
//! type = "constant"
//! value = 1.0
//! [metric]
//! bins = 20
//! robust_repeats = 1
//! [output]
//! dir = "runs/circles"
//! ```

use std::path::{Path, PathBuf};

use cuot::trainer::{EvalOptions, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directory; relative paths resolve against the output root.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub metric: EvalOptions,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.train.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Copy with every optional setting resolved to the value actually used.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.train.data.noise = Some(self.train.data.noise());
        let n_test = self.train.data.n_test;
        out.metric.joint_points = Some(self.metric.joint_points.unwrap_or(n_test).min(n_test));
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes")
    }
}
