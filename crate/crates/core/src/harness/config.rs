//! Run configuration and the flat `key=value` config-file format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::ModelSize;
use crate::error::{bail, Error, Result};
use crate::model::ModelConfig;

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn pretrain() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }

    pub fn finetune() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bail!(Config, "{name} must lie in [0, 1), got {b}");
            }
        }
        if !(self.eps > 0.0) {
            bail!(Config, "eps must be positive, got {}", self.eps);
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight decay must be non-negative, got {}", self.weight_decay);
        }
        Ok(())
    }
}

/// Element type used for training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "single" => Ok(Self::F32),
            "f64" | "double" => Ok(Self::F64),
            other => Err(Error::Config(format!("unknown precision {other:?} (expected f32 or f64)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub optim: OptimConfig,
    /// Stop after this many optimizer steps; the schedule still spans
    /// `epochs`, so a truncated run follows the same learning-rate curve.
    pub max_steps: Option<usize>,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Data failures tolerated before the run aborts.
    pub max_failures: usize,
    /// Temporal stride between sampled frames.
    pub frame_stride: usize,
    pub video_mean: [f64; 3],
    pub video_std: [f64; 3],
    pub precision: Precision,
}

impl TrainConfig {
    /// Pre-training defaults for a model size.
    pub fn pretrain(size: ModelSize) -> Self {
        Self {
            seed: 0,
            model: ModelConfig::new(size),
            batch_size: 8,
            base_lr: 3e-4,
            warmup_epochs: 5,
            epochs: 100,
            optim: OptimConfig::pretrain(),
            max_steps: None,
            checkpoint_every: 0,
            max_failures: 10,
            frame_stride: 4,
            video_mean: [0.5; 3],
            video_std: [0.5; 3],
            precision: Precision::F32,
        }
    }

    /// Fine-tuning defaults for a model size.
    pub fn finetune(size: ModelSize) -> Self {
        Self { base_lr: 1e-3, optim: OptimConfig::finetune(), ..Self::pretrain(size) }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            bail!(Config, "base learning rate must be positive, got {}", self.base_lr);
        }
        if self.epochs == 0 {
            bail!(Config, "epochs must be at least 1");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if self.frame_stride == 0 {
            bail!(Config, "frame stride must be at least 1");
        }
        if self.video_std.iter().any(|&s| !(s > 0.0)) {
            bail!(Config, "video std must be positive, got {:?}", self.video_std);
        }
        if self.max_steps == Some(0) {
            bail!(Config, "max steps must be at least 1");
        }
        Ok(())
    }

    /// Optimizer steps in one epoch over `samples` clips (last batch kept).
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// Parses a flat config file: one `key = value` per line, `#` comments,
/// blank lines ignored.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(Config, "line {}: expected key=value, got {line:?}", n + 1);
        };
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key.contains(char::is_whitespace) {
            bail!(Config, "line {}: bad key {key:?}", n + 1);
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Turns config-file pairs into `--key=value` arguments.
pub fn config_args(pairs: &[(String, String)]) -> Vec<String> {
    pairs.iter().map(|(k, v)| format!("--{k}={v}")).collect()
}
