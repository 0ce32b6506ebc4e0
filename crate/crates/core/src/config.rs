use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::SynthConfig;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{BittConfig, EncoderConfig, WindowConfig};
use crate::objective::LossWeights;
use crate::prior::PriorConfig;
use crate::prs::PrsConfig;
use crate::trainer::TrainConfig;

/// Every hyperparameter of the pipeline. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub prior: PriorConfig,
    pub encoder: EncoderConfig,
    pub window: WindowConfig,
    pub bitt: BittConfig,
    pub prs: PrsConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.encoder.validate()?;
        self.window.validate()?;
        self.bitt.validate()?;
        self.prs.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Writes the effective configuration with every default filled in.
    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self)
    }
}
