//! Run configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::apf::ApfConfig;
use crate::eval::EvalConfig;
use crate::perception::PerceptionConfig;
use crate::ppo::PpoConfig;
use crate::reward::RewardConfig;
use crate::world::WorldConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub apf: ApfConfig,
    pub perception: PerceptionConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            world: WorldConfig::default(),
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
            apf: ApfConfig::default(),
            perception: PerceptionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.reward.validate()?;
        self.ppo.validate()?;
        self.apf.validate()?;
        self.perception.validate()?;
        self.eval.validate()
    }

    /// Parses and validates.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Every field written out, defaults included.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
