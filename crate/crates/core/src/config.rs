//! Experiment file for the command-line tool: training hyperparameters plus
//! the data source, split and tiling settings, as one TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::TileSpec;
use crate::phantom::{PhantomSpec, SplitSpec};
use crate::train::TrainConfig;

/// Real volumes to train on. Without this section training uses a phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSource {
    pub clinical: PathBuf,
    pub micro: PathBuf,
    #[serde(default = "default_patches")]
    pub n_patches: usize,
    #[serde(default = "default_threshold")]
    pub foreground_threshold: f64,
}

fn default_patches() -> usize {
    160
}

fn default_threshold() -> f64 {
    0.25
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitLimits {
    pub max_steps_per_epoch: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
    pub split: SplitSpec,
    pub data: Option<VolumeSource>,
    pub fit: FitLimits,
    pub tiles: TileSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.phantom.validate()?;
        self.tiles.validate()?;
        if self.fit.max_steps_per_epoch == Some(0) {
            return Err(Error::Config("fit.max_steps_per_epoch must be >= 1".into()));
        }
        if let Some(d) = &self.data {
            if d.n_patches == 0 {
                return Err(Error::Config("data.n_patches must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// One seed for every random stage of a run.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.phantom.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn roundtrips_and_rejects_unknown_keys() {
        let mut c = RunConfig::default();
        c.train.epochs = 3;
        c.phantom.dims_hr = [8, 256, 256];
        c.fit.max_steps_per_epoch = Some(2);
        c.data = Some(VolumeSource {
            clinical: "a.mhd".into(),
            micro: "b.mhd".into(),
            n_patches: 10,
            foreground_threshold: 0.1,
        });
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert!(RunConfig::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml("[extra]\n").is_err());
        assert!(RunConfig::from_toml("[tiles]\nstride = 64\n").is_err());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let mut c = RunConfig::default();
        c.set_seed(9);
        assert_eq!((c.train.seed, c.phantom.seed), (9, 9));
    }
}
