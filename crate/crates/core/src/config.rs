//! Run configuration: one TOML file drives data generation, training,
//! evaluation, and post-training.
//!
//! Every section rejects unknown keys and falls back to the desk defaults
//! for missing ones, so a partial file stays valid while a typo fails
//! loudly. The fully resolved configuration is written next to the run's
//! outputs with a version stamp.

use crate::grpo::GrpoConfig;
use crate::metrics::RfsParams;
use crate::model::BackboneConfig;
use crate::optim::{AdamWConfig, LrSchedule};
use crate::train::{SftConfig, StreamTrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV_VAR: &str = "MINDVLA_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("{0}")]
    BadValue(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenarios: usize,
    pub eval_scenarios: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_scenarios: 64, eval_scenarios: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Euler integration steps.
    pub steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { steps: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Guidance strength at inference.
    pub scale: f64,
    /// Probability of training an element unconditionally.
    pub drop_p: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { scale: crate::intent::CFG_SCALE, drop_p: crate::intent::INTENT_DROP_P }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// FIFO channel capacity in entries.
    pub capacity: usize,
    /// Age normalization for the modulation feature, seconds.
    pub time_scale: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { capacity: 2, time_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        TrainConfig {
            steps: 800,
            batch_size: 8,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            warmup_steps: 100,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub steps: usize,
    pub lanes: usize,
    pub window: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig { steps: 400, lanes: 2, window: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostTrainConfig {
    pub group_size: usize,
    pub clip: f64,
    pub beta_kl: f64,
    pub sigma: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub iterations: usize,
    pub frames_per_iteration: usize,
}

impl Default for PostTrainConfig {
    fn default() -> Self {
        let g = GrpoConfig::desk();
        PostTrainConfig {
            group_size: g.group_size,
            clip: g.clip,
            beta_kl: g.beta_kl,
            sigma: g.sigma,
            lr: g.optimizer.lr,
            grad_clip: g.grad_clip,
            iterations: g.iterations,
            frames_per_iteration: g.frames_per_iteration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out_dir: "runs/desk".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub version: String,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
    pub flow: FlowConfig,
    pub guidance: GuidanceConfig,
    pub memory: MemoryConfig,
    pub train: TrainConfig,
    pub stream: StreamConfig,
    pub metrics: RfsParams,
    pub grpo: PostTrainConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            version: env!("CARGO_PKG_VERSION").into(),
            backbone: BackboneConfig::desk(),
            data: DataConfig::default(),
            flow: FlowConfig::default(),
            guidance: GuidanceConfig::default(),
            memory: MemoryConfig::default(),
            train: TrainConfig::default(),
            stream: StreamConfig::default(),
            metrics: RfsParams::default(),
            grpo: PostTrainConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply the seed override from the environment, if set. Returns
    /// whether an override was applied.
    pub fn apply_env(&mut self) -> Result<bool> {
        match std::env::var(SEED_ENV_VAR) {
            Ok(s) => {
                self.seed = s.trim().parse::<u64>().map_err(|e| {
                    ConfigError::BadValue(format!("{SEED_ENV_VAR}={s:?} is not a seed: {e}"))
                })?;
                Ok(true)
            }
            Err(_) => Ok(false),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate().map_err(|e| ConfigError::BadValue(e.to_string()))?;
        self.metrics.validate().map_err(|e| ConfigError::BadValue(e.to_string()))?;
        self.grpo_config().validate().map_err(|e| ConfigError::BadValue(e.to_string()))?;
        if self.flow.steps == 0 {
            return Err(ConfigError::BadValue("flow.steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.guidance.drop_p) {
            return Err(ConfigError::BadValue(format!(
                "guidance.drop_p {} outside [0, 1]",
                self.guidance.drop_p
            )));
        }
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return Err(ConfigError::BadValue("train.steps and batch_size must be positive".into()));
        }
        if self.stream.lanes == 0 || self.stream.window == 0 {
            return Err(ConfigError::BadValue("stream.lanes and window must be positive".into()));
        }
        if self.memory.capacity == 0 {
            return Err(ConfigError::BadValue("memory.capacity must be positive".into()));
        }
        Ok(())
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            seed: self.seed,
            optimizer: AdamWConfig {
                lr: self.train.lr,
                weight_decay: self.train.weight_decay,
                ..AdamWConfig::default()
            },
            schedule: Some(LrSchedule {
                warmup_steps: self.train.warmup_steps,
                total_steps: self.train.steps,
                floor_frac: 0.1,
            }),
            intent_drop_p: self.guidance.drop_p,
            grad_clip: self.train.grad_clip,
        }
    }

    pub fn stream_config(&self) -> StreamTrainConfig {
        StreamTrainConfig {
            steps: self.stream.steps,
            lanes: self.stream.lanes,
            window: self.stream.window,
            channel_capacity: self.memory.capacity,
            time_scale: self.memory.time_scale,
            seed: self.seed,
            optimizer: AdamWConfig {
                lr: self.train.lr,
                weight_decay: self.train.weight_decay,
                ..AdamWConfig::default()
            },
            schedule: Some(LrSchedule {
                warmup_steps: self.train.warmup_steps,
                total_steps: self.stream.steps,
                floor_frac: 0.1,
            }),
            intent_drop_p: self.guidance.drop_p,
            grad_clip: self.train.grad_clip,
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.grpo.group_size,
            clip: self.grpo.clip,
            beta_kl: self.grpo.beta_kl,
            sigma: self.grpo.sigma,
            steps: self.flow.steps,
            optimizer: AdamWConfig {
                lr: self.grpo.lr,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            grad_clip: self.grpo.grad_clip,
            iterations: self.grpo.iterations,
            frames_per_iteration: self.grpo.frames_per_iteration,
            seed: self.seed,
            rfs: self.metrics.clone(),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.out_dir)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Write the fully resolved configuration (with the version stamp)
    /// next to the run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("resolved.toml");
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}
