//! Layered run configuration: built-in defaults, then the TOML config file,
//! then command-line flags. The fully resolved configuration is written
//! into the output directory so every run can be reproduced from it alone.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use demix::datagen::CritterParams;
use demix::model::ModelConfig;
use demix::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSection {
    #[serde(flatten)]
    pub params: CritterParams,
    pub count: usize,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection {
            params: CritterParams::default(),
            count: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
}

/// Union of the per-command sections; commands read the ones they need.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen: Option<GenSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_opt(path: Option<&PathBuf>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    /// Writes the resolved configuration next to the run's outputs.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("run-config.toml");
        let text = toml::to_string_pretty(self).context("serializing run config")?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

/// The default model when neither file nor flags specify one: a 3-level
/// LC HVAE on 64-px patches, sized for commodity hardware.
pub fn default_model_config() -> ModelConfig {
    ModelConfig {
        mode: demix::model::Mode::Hvae,
        variant: demix::model::Variant::Lc,
        n_levels: 3,
        n_lc: 2,
        patch_size: 64,
        base_channels: 16,
        res_blocks_per_block: 1,
        z_channels: 8,
        seed: 0,
        deep_bu_scale: true,
    }
}

pub fn default_train_config() -> TrainConfig {
    TrainConfig::default()
}
