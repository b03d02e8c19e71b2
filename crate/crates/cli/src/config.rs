//! Run configuration: a JSON file is the source of truth, flags override keys.

use std::path::{Path, PathBuf};

use ctnet::arch::ModelConfig;
use ctnet::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Manifest file or image directory of clean training images.
    pub data: Option<PathBuf>,
    /// Clean validation images, noised once with a fixed seed.
    pub val: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: None,
            val: None,
            out: None,
            init_seed: 0,
        }
    }
}

impl RunConfig {
    /// The desk-scale preset: width 8, window 4, two heads, 16x16 patches.
    pub fn tiny(channels: usize) -> Self {
        RunConfig { model: ModelConfig::tiny(channels), train: TrainConfig::tiny(), ..Self::default() }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.patch.patch_size % self.model.spatial_multiple() != 0 {
            eprintln!(
                "note: patch size {} is not a multiple of {}; patches are mirror-padded",
                self.train.patch.patch_size,
                self.model.spatial_multiple()
            );
        }
        Ok(())
    }
}

/// A preset name (`tiny`, `paper`, optionally suffixed `-gray`/`-color`) or a JSON file.
pub fn resolve(spec: Option<&str>, tiny: bool) -> CliResult<RunConfig> {
    let preset = |name: &str| -> Option<RunConfig> {
        let (base, channels) = match name.rsplit_once('-') {
            Some((b, "gray")) => (b, 1),
            Some((b, "color")) => (b, 3),
            _ => (name, 1),
        };
        match base {
            "tiny" => Some(RunConfig::tiny(channels)),
            "paper" => Some(RunConfig { model: ModelConfig::paper(channels), ..RunConfig::default() }),
            _ => None,
        }
    };
    match spec {
        None if tiny => Ok(RunConfig::tiny(1)),
        None => Ok(RunConfig::default()),
        Some(s) => match preset(s) {
            Some(c) => Ok(c),
            None => {
                let mut c = RunConfig::load(Path::new(s))?;
                if tiny {
                    let tiny = RunConfig::tiny(c.model.image_channels);
                    c.model = ModelConfig { ablation: c.model.ablation, ..tiny.model };
                }
                Ok(c)
            }
        },
    }
}
