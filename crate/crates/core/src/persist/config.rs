use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::model::{Hyperparams, ModelConfig};
use crate::trainer::TrainConfig;

/// Everything needed to reproduce a run. Every key has a default, so an
/// empty document is the reference configuration; unknown keys are rejected.
///
/// ```toml
/// [model]
/// latent_dim = 10
/// action_dim = 4
///
/// [loss]
/// beta = 20.0
/// alpha = 0.01
///
/// [train]
/// total_steps = 200000
/// vae_only = true
///
/// [env]
/// pos_step = 0.03125
///
/// [metrics]
/// samples = 10000
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: Hyperparams,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.env.validate()?;
        self.metrics.validate()
    }
}
