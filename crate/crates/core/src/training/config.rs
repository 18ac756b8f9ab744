//! Run configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, StageConfig};
use crate::context::TopicConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::tensor::Precision;

/// How the learning rate decays after the warm period.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Multiply by the decay rate once per epoch after `decay_after` epochs.
    #[default]
    PerEpoch,
    /// Multiply by the decay rate once every `decay_after` epochs.
    Stepwise,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_rate: f64,
    pub decay_after: usize,
    pub schedule: Schedule,
    /// Global gradient norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            decay_rate: 0.9,
            decay_after: 10,
            schedule: Schedule::PerEpoch,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate in effect during 1-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let e = epoch.max(1);
        let steps = match self.schedule {
            Schedule::Constant => 0,
            Schedule::PerEpoch => e.saturating_sub(self.decay_after),
            Schedule::Stepwise if self.decay_after == 0 => 0,
            Schedule::Stepwise => (e - 1) / self.decay_after,
        };
        self.learning_rate * self.decay_rate.powi(steps as i32)
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("optimizer: {what}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate must lie in (0, 1]");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Architecture choices shared by every sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Per-level hidden sizes; defaults to each tap's channel count.
    pub hidden_dims: Option<Vec<usize>>,
    pub fusion: FusionMode,
    pub attention_filters: usize,
    pub topic: TopicConfig,
    /// Freeze recurrent, global and topic matrices at zero.
    pub ablate_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            hidden_dims: None,
            fusion: FusionMode::Attention,
            attention_filters: 64,
            topic: TopicConfig::default(),
            ablate_context: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if let Some(h) = &self.hidden_dims {
            if h.len() != self.backbone.taps.len() {
                return Err(Error::Config(format!(
                    "hidden_dims has {} entries for {} levels",
                    h.len(),
                    self.backbone.taps.len()
                )));
            }
            if h.contains(&0) {
                return Err(Error::Config("hidden_dims entries must be positive".into()));
            }
        }
        if self.fusion == FusionMode::Attention && self.attention_filters == 0 {
            return Err(Error::Config("attention_filters must be positive".into()));
        }
        if self.topic.scales == 0 || self.topic.orientations == 0 || self.topic.grid == 0 {
            return Err(Error::Config("topic scales, orientations and grid must be positive".into()));
        }
        if !(self.topic.base_sigma > 0.0) {
            return Err(Error::Config("topic base_sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.hidden_dims
            .clone()
            .unwrap_or_else(|| self.backbone.tap_channels())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Write a checkpoint every this many epochs (the final one is always written).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 60,
            batch_size: 1,
            checkpoint_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.training.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.training.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// Small model for 16×16 inputs: taps at strides 1, 2 and 4 so every
    /// level stays at least 4×4.
    pub fn tiny() -> Self {
        Config {
            model: ModelConfig {
                backbone: BackboneConfig {
                    stages: vec![
                        StageConfig { filters: 4, pool: false },
                        StageConfig { filters: 6, pool: true },
                        StageConfig { filters: 8, pool: true },
                    ],
                    taps: vec![1, 2, 3],
                },
                attention_filters: 8,
                ..ModelConfig::default()
            },
            ..Config::default()
        }
    }
}
