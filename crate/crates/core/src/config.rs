//! Run configuration, read from and written to TOML.

use crate::error::{Error, Result};
use crate::guider::GuiderConfig;
use crate::losses::LossConfig;
use crate::segmodel::SegModelConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: String,
    pub seed: u64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lr_guider: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Linear warmup length; defaults to 10% of `total_steps`.
    pub warmup_steps: Option<u64>,
    /// EMA momentum of the teacher.
    pub alpha: f64,
    pub weight_decay: f64,
    /// When false the guider runs but is never updated.
    pub optimize_guider: bool,
    /// Write a resumable checkpoint every this many steps (0 = only at end).
    pub checkpoint_interval: u64,
    /// Evaluate on the held-out target split every this many steps (0 = only at end).
    pub eval_interval: u64,
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
    pub model: SegModelConfig,
    pub guider: GuiderConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: "dacs_guidance".into(),
            seed: 0,
            lr_encoder: 6e-5,
            lr_decoder: 6e-4,
            lr_guider: 6e-5,
            batch_size: 2,
            total_steps: 4000,
            warmup_steps: None,
            alpha: 0.999,
            weight_decay: 0.01,
            optimize_guider: true,
            checkpoint_interval: 1000,
            eval_interval: 500,
            source_dir: None,
            target_dir: None,
            train_split: "train".into(),
            val_split: "val".into(),
            model: SegModelConfig::default(),
            guider: GuiderConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with the guider narrowed to the toy encoder's width.
    pub fn desk() -> Self {
        let model = SegModelConfig::default();
        TrainConfig {
            guider: GuiderConfig::desk(model.feature_dim()),
            model,
            ..Self::default()
        }
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.total_steps / 10)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
            ("lr_guider", self.lr_guider),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if self.warmup() > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup(),
                self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} not in [0,1]", self.alpha)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        self.model.validate()?;
        self.guider.validate()?;
        self.loss.validate()?;
        if self.guider.feature_dim != self.model.feature_dim() {
            return Err(Error::Config(format!(
                "guider feature_dim {} differs from encoder width {}",
                self.guider.feature_dim,
                self.model.feature_dim()
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is serialisable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = TrainConfig::desk();
        cfg.seed = 7;
        cfg.warmup_steps = Some(3);
        cfg.source_dir = Some("data/src".into());
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = TrainConfig::from_toml_str("total_steps = 50\n[loss]\nlambda_gt = 0.0\n").unwrap();
        assert_eq!(cfg.total_steps, 50);
        assert_eq!(cfg.warmup(), 5);
        assert_eq!(cfg.loss.lambda_gt, 0.0);
        assert_eq!(cfg.lr_decoder, 6e-4);
        assert!(TrainConfig::from_toml_str("learning_rate = 1").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        let bad = TrainConfig {
            warmup_steps: Some(10),
            total_steps: 5,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_guider: 0.0,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::desk();
        bad.guider.feature_dim = 64;
        assert!(bad.validate().is_err());
    }
}
