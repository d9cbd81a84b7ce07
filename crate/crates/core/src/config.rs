//! JSON run configuration shared by all pipeline stages.
//!
//! One file drives the whole pipeline; every stage reads its own section.
//! Unknown keys are rejected so typos fail loudly before anything runs.

use crate::error::ConfigError;
use crate::eval::EvalConfig;
use crate::objective::LossWeights;
use crate::params::AdamHp;
use crate::phantom::GenParams;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Classifier pretraining stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHp,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { epochs: 20, batch_size: 16, adam: AdamHp::classifier() }
    }
}

/// Alternating adversarial stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHp,
    pub weights: LossWeights,
    /// Training-state checkpoint cadence in optimization steps.
    pub checkpoint_every: u64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            epochs: 60,
            batch_size: 16,
            adam: AdamHp::gan(),
            weights: LossWeights::default(),
            checkpoint_every: 200,
        }
    }
}

/// Top-level configuration: dataset generation, both training stages and
/// evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Master seed; stage seeds are derived from it. Overridden by --seed.
    pub seed: u64,
    /// Dataset directory for stages that consume one.
    pub dataset: Option<PathBuf>,
    /// Frozen classifier checkpoint for train/ablate/evaluate.
    pub classifier_checkpoint: Option<PathBuf>,
    /// Trained generator checkpoint for evaluate/synthesize.
    pub generator_checkpoint: Option<PathBuf>,
    pub n_subjects: usize,
    pub data: GenParams,
    pub classifier: ClassifierConfig,
    pub adversarial: AdversarialConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: 1,
            seed: 0,
            dataset: None,
            classifier_checkpoint: None,
            generator_checkpoint: None,
            n_subjects: 1000,
            data: GenParams::default(),
            classifier: ClassifierConfig::default(),
            adversarial: AdversarialConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path)?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != 1 {
            return Err(ConfigError::Invalid(format!("unsupported version {}", self.version)));
        }
        if self.classifier.epochs == 0 || self.adversarial.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be at least 1".into()));
        }
        if self.classifier.batch_size == 0 || self.adversarial.batch_size == 0 {
            return Err(ConfigError::Invalid("batch size must be at least 1".into()));
        }
        if self.adversarial.checkpoint_every == 0 {
            return Err(ConfigError::Invalid("checkpoint_every must be at least 1".into()));
        }
        self.data.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.adversarial
            .weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = RunConfig::defaults();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n_subjects, 1000);
        assert_eq!(back.adversarial.epochs, 60);
        assert_eq!(back.adversarial.weights.vox_plus, 20.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: Result<RunConfig, _> = serde_json::from_str(r#"{"version":1,"bogus":3}"#);
        assert!(r.is_err());
        let r2: Result<RunConfig, _> =
            serde_json::from_str(r#"{"adversarial":{"weights":{"lambda_typo":1}}}"#);
        assert!(r2.is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"n_subjects":64}"#).unwrap();
        assert_eq!(cfg.n_subjects, 64);
        assert_eq!(cfg.classifier.epochs, ClassifierConfig::default().epochs);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg = RunConfig::defaults();
        cfg.adversarial.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg2 = RunConfig::defaults();
        cfg2.adversarial.weights.vox_plus = -1.0;
        assert!(cfg2.validate().is_err());
        let mut cfg3 = RunConfig::defaults();
        cfg3.data.p_gad = 2.0;
        assert!(cfg3.validate().is_err());
    }
}
