//! One JSON document holding every knob of a run.
//!
//! Missing keys take their defaults and unknown keys are rejected. The
//! defaults are the reference hyperparameters:
//!
//! * part priors `(0, −0.6)`, `(0, 0)`, `(0, 0.6)` with α = 0.5, β = 0.1, γ = 1,
//! * ξ₁ = ξ₂ = 1 inside the localization loss and λ = 0.1 in the objective,
//! * η = 0.01 decayed ×0.1 every 10⁴ iterations, μ = 0.9, weight decay 5·10⁻³,
//!   batch 64, localization learning rate at 1% of η.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::layers::Dropout;
use crate::model::{ModelConfig, ModelMode};
use crate::mscan::MscanConfig;
use crate::part_losses::{LossWeights, PartPrior};
use crate::stn::NUM_PARTS;
use crate::trainer::TrainConfig;

/// Optional default locations; command-line arguments take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: ModelMode,
    pub mscan: MscanConfig,
    /// Dropout rate after every fully-connected layer.
    pub dropout: f64,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub priors: [PartPrior; NUM_PARTS],
    pub synthetic: SyntheticConfig,
    pub eval: EvalOptions,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: ModelMode::Fusion,
            mscan: MscanConfig::default(),
            dropout: Dropout::<f32>::DEFAULT_RATE,
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            priors: PartPrior::defaults(),
            synthetic: SyntheticConfig::default(),
            eval: EvalOptions::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The training configuration with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn model_config(&self, mode: ModelMode, num_classes: usize) -> ModelConfig {
        ModelConfig {
            dropout: self.dropout,
            priors: self.priors,
            ..ModelConfig::new(mode, self.mscan.clone(), num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mscan.validate()?;
        self.train_config().validate()?;
        self.loss.validate()?;
        self.synthetic.validate()?;
        self.priors.iter().try_for_each(|p| p.validate())?;
        Dropout::<f32>::new(self.dropout).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_reference_values() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.loss.lambda, 0.1);
        assert_eq!(cfg.train.base_lr, 0.01);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.loc_lr_ratio, 0.01);
        assert_eq!(cfg.priors[2].cy, 0.6);
        assert_eq!(cfg.mscan.width_multiplier, 1.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 4, "train": {"batch_size": 8}, "mscan": {"width_multiplier": 0.25}}"#)
            .unwrap();
        assert_eq!(cfg.train_config().seed, 4);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.mscan.dilation_set, vec![1, 2, 3]);
        let m = cfg.model_config(ModelMode::Parts, 7);
        assert_eq!((m.num_classes, m.mscan.width_multiplier), (7, 0.25));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [r#"{"sed": 1}"#, r#"{"train": {"lr": 0.1}}"#, r#"{"train": {"seed": 3}}"#, "{"] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::from_json(r#"{"train": {"batch_size": 1}}"#).unwrap();
        assert!(cfg.validate().is_err());
    }
}
