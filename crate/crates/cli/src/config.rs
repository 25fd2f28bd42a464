use std::fs;
use std::path::Path;

use alifuse::model::ModelConfig;
use alifuse::trainer::TrainConfig;
use alifuse::{Error, Result};
use serde::{Deserialize, Serialize};

/// Contents of a `--config` file. Every field may be omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Minimum corpus count for a word to enter the vocabulary.
    pub min_freq: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::desk(), train: TrainConfig::default(), min_freq: 1 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
