use std::fs;
use std::path::Path;

use anyhow::Context;
use fpage_core::cleaning::CleaningConfig;
use fpage_core::loss::LossConfig;
use fpage_core::{LabelCodecConfig, ToyBackboneConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything a run can be configured with. Every section is optional in
/// the TOML file and falls back to the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub codec: LabelCodecConfig,
    pub backbone: ToyBackboneConfig,
    pub cleaning: CleaningConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `--seed` overrides every seed that drives run-time randomness. The
    /// backbone seed is left alone: it identifies a fixed feature extractor.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
            self.cleaning.seed = s;
        }
        self
    }
}
