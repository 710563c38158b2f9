//! The single JSON run configuration: model topology, training schedule,
//! and paths. Unknown keys are rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use neuronet::graph::ModelConfig;
use neuronet::train::TrainConfig;
use neuronet::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Dataset manifest; label/image paths inside it are relative to its
    /// directory.
    pub manifest: PathBuf,
    /// Where checkpoints and the training log go.
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("run config {}: {e}", path.display())))?;
        config.model.validate()?;
        config.train.validate()?;
        Ok(config)
    }

    /// Fully resolved JSON with every default made explicit; feeding this
    /// back through `load` reproduces the identical run plan.
    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
