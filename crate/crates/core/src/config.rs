//! Run configuration shared by the library pipeline and the CLI.
//!
//! Every field has an explicit default; a TOML file may set any subset and
//! command-line flags override file values.

use crate::error::{Error, Result};
use crate::schedule::ScheduleParams;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Encoder geometry knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSettings {
    /// Number of feature levels n.
    pub levels: usize,
    /// Feature width d.
    pub dim: usize,
    /// Seed of the fixed random projection.
    pub seed: u64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            levels: 3,
            dim: 64,
            seed: 40,
        }
    }
}

/// Training knobs for the base model and per-category customization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub base_channels: usize,
    pub temb_dim: usize,
    pub base_epochs: usize,
    pub base_learning_rate: f64,
    pub customize_epochs: usize,
    pub customize_learning_rate: f64,
    /// Augmented copies per reference.
    pub per_image: usize,
    /// Prior-preservation set size; 0 means twice the demo count.
    pub prior_count: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            base_channels: 4,
            temb_dim: 16,
            base_epochs: 150,
            base_learning_rate: 0.05,
            customize_epochs: 40,
            customize_learning_rate: 0.05,
            per_image: 4,
            prior_count: 0,
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Partial-noising depth for query personalization.
    pub t_ratio: f64,
    /// Weight of the bank branch in the fused score.
    pub alpha: f64,
    /// Weight of the text branch in the fused score.
    pub beta: f64,
    pub bank_capacity: usize,
    /// Gentler noising depth used when generating bank samples.
    pub t_ratio_bank: f64,
    /// Samples per category for pool export.
    pub generate_count: usize,
    /// Softmax temperature of the text branch.
    pub temperature: f64,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub encoder: EncoderSettings,
    pub schedule: ScheduleParams,
    pub train: TrainSettings,
    /// Checkpoint/bank cache directory; unset disables caching.
    pub cache_dir: Option<PathBuf>,
    /// Record per-query wall-clock in evaluation records.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            t_ratio: 0.3,
            alpha: 1.0,
            beta: 0.5,
            bank_capacity: 30,
            t_ratio_bank: 0.15,
            generate_count: 100,
            temperature: 1.0,
            shots: vec![2, 4, 8],
            seeds: vec![0, 1, 2, 3, 4],
            encoder: EncoderSettings::default(),
            schedule: ScheduleParams::default(),
            train: TrainSettings::default(),
            cache_dir: None,
            timing: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_ratio > 0.0 && self.t_ratio < 1.0) {
            return Err(Error::InvalidParameter {
                name: "t_ratio",
                reason: format!("must lie in (0, 1), got {}", self.t_ratio),
            });
        }
        if !(self.t_ratio_bank > 0.0 && self.t_ratio_bank < 1.0) {
            return Err(Error::InvalidParameter {
                name: "t_ratio_bank",
                reason: format!("must lie in (0, 1), got {}", self.t_ratio_bank),
            });
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "temperature",
                reason: "must be positive".into(),
            });
        }
        if self.shots.is_empty() || self.seeds.is_empty() {
            return Err(Error::EmptyInput("shots/seeds"));
        }
        if let Some(&k) = self.shots.iter().max() {
            if self.bank_capacity < k {
                return Err(Error::InvalidParameter {
                    name: "bank_capacity",
                    reason: format!("capacity {} below max shot count {k}", self.bank_capacity),
                });
            }
        }
        if self.encoder.levels < 2 || self.encoder.dim == 0 {
            return Err(Error::InvalidParameter {
                name: "encoder",
                reason: "need >= 2 levels and positive dim".into(),
            });
        }
        if self.schedule.num_steps < 2 {
            return Err(Error::InvalidParameter {
                name: "schedule.num_steps",
                reason: "need at least 2 steps".into(),
            });
        }
        Ok(())
    }

    pub fn load_toml(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| Error::Format {
            what: "config",
            reason: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format {
            what: "config",
            reason: e.to_string(),
        })?;
        crate::container::write_atomic(path, text.as_bytes())
    }

    /// Stable hash over the fields that shape trained artifacts; used as the
    /// cache key component.
    pub fn artifact_hash(&self) -> String {
        let mut h = crate::util::ContentHasher::new("runconfig-artifacts-v1");
        let key = serde_json::json!({
            "schedule": self.schedule,
            "train": self.train,
            "encoder": self.encoder,
            "t_ratio_bank": self.t_ratio_bank,
            "bank_capacity": self.bank_capacity,
        });
        h.update(serde_json::to_string(&key).unwrap().as_bytes());
        h.finish_hex()
    }
}
