//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::conditioning::DropoutPolicy;
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::GuidanceConfig;

use super::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::ScaledLinear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Reuse the step-1 batch (records, timesteps, noise and dropout) on
    /// every step.
    pub fixed_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            max_steps: 2000,
            checkpoint_every: 500,
            fixed_batch: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a training or editing run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "CodecConfig::desk")]
    pub codec: CodecConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub dropout: DropoutPolicy,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Defaults everywhere except the seed.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            train: TrainConfig::default(),
            codec: CodecConfig::desk(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            optimizer: AdamWConfig::default(),
            dropout: DropoutPolicy::default(),
            guidance: GuidanceConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// The small from-scratch setup: 32×32 clips of 9 frames, the desk
    /// codec and a step size suited to training without a pretrained
    /// backbone.
    pub fn desk(seed: u64) -> Self {
        let mut cfg = Self::new(seed);
        cfg.optimizer.lr = 5e-4;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
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
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.model.validate()?;
        self.dropout.validate()?;
        self.guidance.validate()?;
        self.optimizer.validate()?;
        if self.model.channels != self.codec.channels {
            return Err(Error::Config(format!(
                "model expects {} latent channels, codec produces {}",
                self.model.channels, self.codec.channels
            )));
        }
        if self.schedule.steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if self.guidance.steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "{} sampling steps exceed the {}-step schedule",
                self.guidance.steps, self.schedule.steps
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Fails unless every configured path exists.
    pub fn check_paths(&self) -> Result<()> {
        if let Some(p) = &self.paths.data {
            if !p.exists() {
                return Err(Error::Config(format!("data path {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
