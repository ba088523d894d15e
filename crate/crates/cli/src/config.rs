//! On-disk run configuration and run manifest.

use std::fs;
use std::path::Path;

use pstnet::nn::SgdConfig;
use pstnet::{Error, NetConfig, Result};
use serde::{Deserialize, Serialize};

fn yes() -> bool {
    true
}

/// Network plus optimizer settings; `train --epochs/--batch/--seed` complete it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub network: NetConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Seeded anchor/neighbor sampling while training.
    #[serde(default = "yes")]
    pub seeded_sampling: bool,
    /// Frame dilation of training and validation clips.
    #[serde(default = "one")]
    pub frame_stride: usize,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn new(network: NetConfig) -> Self {
        Self { network, sgd: SgdConfig::default(), seeded_sampling: true, frame_stride: 1 }
    }

    /// Read a run configuration, or a bare network configuration with default training settings.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let parsed = if value.get("network").is_some() {
            serde_json::from_value::<RunConfig>(value)
        } else {
            serde_json::from_value::<NetConfig>(value).map(RunConfig::new)
        };
        parsed.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Written to the output directory before the first training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub output_dir: String,
    pub metric_log: String,
    pub run_config: RunConfig,
}
