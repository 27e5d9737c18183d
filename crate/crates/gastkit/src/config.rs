//! Run configuration. Precedence is command-line flags, then the config
//! file, then these defaults.

use std::path::{Path, PathBuf};

use gast_core::decoder::DecodeConfig;
use gast_core::losses::LossConfig;
use gast_core::optim::AdamConfig;
use gast_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// Directory of `view_<id>.json` priors; `<dataset>/priors` when unset.
    pub priors: Option<PathBuf>,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub decode: DecodeConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the batches per epoch; a full pass over the training clips when unset.
    pub steps_per_epoch: Option<usize>,
    /// Frame spacing inside a clip.
    pub clip_stride: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data"),
            priors: None,
            out: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            decode: DecodeConfig::default(),
            batch_size: 4,
            epochs: 3,
            steps_per_epoch: None,
            clip_stride: 1,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn priors_dir(&self) -> PathBuf {
        self.priors.clone().unwrap_or_else(|| self.dataset.join("priors"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.clip_stride == 0 {
            return Err(Error::Contract("batch_size, epochs and clip_stride must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Contract("steps_per_epoch must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps >= 0.0) {
            return Err(Error::Contract("invalid optimizer settings".into()));
        }
        Ok(())
    }
}
