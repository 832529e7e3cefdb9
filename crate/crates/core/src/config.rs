//! The versioned JSON configuration of a complete run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::EvalConfig;
use crate::model::ModelConfig;
use crate::objectives::LossConfig;
use crate::synthworld::WorldConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;
/// Environment variable that replaces every seed of a loaded config.
pub const SEED_ENV: &str = "MIXSEP_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config. Missing keys take their defaults;
    /// unknown keys are errors. Parse errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
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

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config_version must be {CONFIG_VERSION}, got {}",
                self.config_version
            )));
        }
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.eval.validate()
    }

    /// Sets the world, training and evaluation seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    /// Applies `MIXSEP_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
                self.set_seed(seed);
                Ok(())
            }
            Err(_) => Ok(()),
        }
    }
}
