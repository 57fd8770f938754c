//! The pipeline config file: one JSON document whose sections feed the
//! individual commands. Everything has a default so an empty `{}` (or no
//! config at all) is a valid starting point; command-line flags win over
//! config values.

use serde::{Deserialize, Serialize};
use standseg_core::preprocess::SplitConfig;
use standseg_core::trainer::TrainConfig;
use standseg_core::tuner::SearchSpace;
use standseg_core::unet::UNetConfig;
use standseg_core::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub orthophoto: Option<PathBuf>,
    pub points: Option<PathBuf>,
    pub stands: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub tile_pixels: usize,
    pub chm_max: f64,
    pub split: SplitConfig,
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub search: SearchSpace,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            tile_pixels: 512,
            chm_max: 39.0,
            split: SplitConfig::new((0.70, 0.15, 0.15), 0).expect("default split"),
            model: UNetConfig::default(),
            train: TrainConfig::default(),
            search: SearchSpace::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Input(format!("config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }
}
