//! The resolved pipeline configuration: every module default in one JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dataset::{CurationRules, DEFAULT_LAMBDA_COT, DEFAULT_LAMBDA_STRUCT};
use crate::forge::{ForgeConfig, Paradigm};
use crate::gateway::GatewayConfig;
use crate::grpo::GrpoConfig;
use crate::reward::RewardConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Run seed; copied into every stage that samples.
    pub seed: u64,
    pub forge: ForgeConfig,
    /// JSON array of paradigms replacing `forge.paradigms` at load time.
    pub paradigms_path: Option<PathBuf>,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    pub gateway: GatewayConfig,
    pub curation: CurationRules,
    /// Share of SFT samples cloned with empty reasoning.
    pub hide_fraction: f64,
    /// Retention probability for empty-gold records.
    pub negative_keep: f64,
    pub lambda_cot: f64,
    pub lambda_struct: f64,
    /// Directory with strategy.txt, rationale.txt and instruction.txt overrides.
    pub templates_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            forge: ForgeConfig::default(),
            paradigms_path: None,
            reward: RewardConfig::default(),
            grpo: GrpoConfig::default(),
            gateway: GatewayConfig::default(),
            curation: CurationRules::default(),
            hide_fraction: 0.1,
            negative_keep: 0.4,
            lambda_cot: DEFAULT_LAMBDA_COT,
            lambda_struct: DEFAULT_LAMBDA_STRUCT,
            templates_dir: None,
        }
    }
}

impl PipelineConfig {
    /// Reads a config file; a missing path means all defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Propagates the run seed and reward section, loads the paradigm file
    /// and checks every section.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        self.forge.seed = self.seed;
        self.grpo.seed = self.seed;
        self.grpo.reward = self.reward;
        if let Some(path) = &self.paradigms_path {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            self.forge.paradigms = serde_json::from_str::<Vec<Paradigm>>(&text).map_err(|source| ConfigError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.forge.validate().map_err(|e| invalid(e.to_string()))?;
        self.reward.validate().map_err(|e| invalid(e.to_string()))?;
        self.grpo.validate().map_err(|e| invalid(e.to_string()))?;
        crate::dataset::adapter(&self.curation.adapter).map_err(|e| invalid(e.to_string()))?;
        for (name, v) in [("hide_fraction", self.hide_fraction), ("negative_keep", self.negative_keep)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.lambda_cot < 0.0 || self.lambda_struct < 0.0 {
            return Err(invalid("loss weights must be non-negative".into()));
        }
        if self.gateway.max_in_flight == 0 {
            return Err(invalid("gateway.max_in_flight must be positive".into()));
        }
        Ok(())
    }

    /// The document embedded in output headers. Secrets are never serialized.
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default().resolve().unwrap();
        let back: PipelineConfig = serde_json::from_value(c.to_value()).unwrap();
        assert_eq!(back.forge, c.forge);
        assert_eq!(back.hide_fraction, 0.1);
        assert_eq!(back.negative_keep, 0.4);
    }

    #[test]
    fn seed_propagates_and_reward_reaches_grpo() {
        let mut c = PipelineConfig::default().with_seed(9);
        c.reward.mode = crate::reward::RewardMode::Soft;
        let c = c.resolve().unwrap();
        assert_eq!((c.forge.seed, c.grpo.seed), (9, 9));
        assert_eq!(c.grpo.reward.mode, crate::reward::RewardMode::Soft);
    }

    #[test]
    fn bad_values_are_rejected() {
        let c = PipelineConfig { hide_fraction: 1.5, ..PipelineConfig::default() };
        assert!(c.resolve().is_err());
        let mut c = PipelineConfig::default();
        c.reward.alpha = 0.5;
        assert!(c.resolve().is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"unknown": 1}"#).is_err());
    }

    #[test]
    fn key_is_not_serialized() {
        let mut c = PipelineConfig::default();
        c.gateway.key = Some("secret".into());
        assert!(!c.to_value().to_string().contains("secret"));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"forge": {"n_per_dim": 2}, "seed": 4}"#).unwrap();
        let c = PipelineConfig::load(Some(&path)).unwrap().resolve().unwrap();
        assert_eq!(c.forge.n_per_dim, 2);
        assert_eq!(c.forge.p, 5);
        assert_eq!(c.forge.seed, 4);
    }
}
