//! JSON run configuration. Unknown keys are rejected; missing keys take the
//! documented defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::{Result, XbtError};
use crate::eval::EvalConfig;
use crate::params::hex;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| XbtError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| XbtError::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty()
            || self.eval.ks.windows(2).any(|w| w[0] >= w[1])
            || self.eval.ks[0] == 0
        {
            return Err(XbtError::Config(format!(
                "eval.ks {:?} must be non-empty, positive and strictly ascending",
                self.eval.ks
            )));
        }
        if self.eval.strict_pair_cap == 0 {
            return Err(XbtError::Config("eval.strict_pair_cap must be >= 1".into()));
        }
        Ok(())
    }

    /// Uses `seed` for both data generation and training.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.synthetic.seed = seed;
        c.train.seed = seed;
        c
    }

    /// The effective (defaults-merged) configuration.
    pub fn effective_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical effective configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}
