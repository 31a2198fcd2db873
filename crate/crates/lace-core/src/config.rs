//! Run configuration: TOML with a fixed key set, defaults for every field,
//! and a stable hash of the resolved values for run manifests.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::ConditioningMode;
use crate::error::{LaceError, Result};
use crate::sampler::SamplerKind;
use crate::schedule::ScheduleKind;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Linear,
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub image_size: usize,
    pub dataset_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            image_size: 32,
            dataset_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub c0: usize,
    pub c1: usize,
    pub c2: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub token_dim: usize,
    pub global_dim: usize,
    pub local_dim: usize,
    pub patch: usize,
    pub mode: ConditioningMode,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c0: 16,
            c1: 24,
            c2: 32,
            groups: 4,
            time_dim: 32,
            token_dim: 128,
            global_dim: 64,
            local_dim: 32,
            patch: 4,
            mode: ConditioningMode::TextOnly,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn denoiser_dims(&self) -> crate::denoiser::DenoiserDims {
        crate::denoiser::DenoiserDims {
            c0: self.c0,
            c1: self.c1,
            c2: self.c2,
            groups: self.groups,
            time_dim: self.time_dim,
            token_dim: self.token_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct StageTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub condition_dropout: f64,
    pub seed: u64,
}

impl Default for StageTrainConfig {
    fn default() -> Self {
        StageTrainConfig {
            learning_rate: 2e-4,
            batch_size: 64,
            steps: 20_000,
            condition_dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainStagesConfig {
    pub encoders: StageTrainConfig,
    pub denoiser: StageTrainConfig,
    pub adapter: StageTrainConfig,
}

impl Default for TrainStagesConfig {
    fn default() -> Self {
        TrainStagesConfig {
            encoders: StageTrainConfig {
                learning_rate: 3e-3,
                batch_size: 16,
                steps: 1500,
                condition_dropout: 0.0,
                seed: 11,
            },
            denoiser: StageTrainConfig::default(),
            adapter: StageTrainConfig {
                learning_rate: 1e-3,
                batch_size: 16,
                steps: 2000,
                condition_dropout: 0.1,
                seed: 13,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub steps: usize,
    pub eta: f64,
    /// "none", "cfg" or "mcg".
    pub guidance: String,
    pub cfg_weight: f64,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: SamplerKind::Ddim,
            steps: 50,
            eta: 0.0,
            guidance: "mcg".into(),
            cfg_weight: 3.0,
            seed: 0,
        }
    }
}

impl SamplerSection {
    pub fn guidance_mode(&self) -> Result<crate::guidance::GuidanceMode> {
        match self.guidance.as_str() {
            "none" => Ok(crate::guidance::GuidanceMode::None),
            "cfg" => Ok(crate::guidance::GuidanceMode::Cfg {
                weight: self.cfg_weight,
            }),
            "mcg" => Ok(crate::guidance::GuidanceMode::Mcg),
            other => Err(LaceError::Config(format!("unknown guidance {other:?}"))),
        }
    }

    pub fn sampler_config(&self) -> Result<crate::sampler::SamplerConfig> {
        Ok(crate::sampler::SamplerConfig {
            kind: self.kind,
            steps: self.steps,
            eta: self.eta,
            guidance: self.guidance_mode()?,
            seed: self.seed,
            clamp_final: true,
        })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainStagesConfig,
    pub sampler: SamplerSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LaceError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Fully resolved TOML, written into every run manifest.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short hex hash of the resolved config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn make_schedule(&self) -> Result<crate::schedule::NoiseSchedule> {
        crate::schedule::make_schedule(
            self.schedule.kind,
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
    }
}
