//! Run configuration, read from a TOML file with one section per module.
//! Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dagm::PlanConfig;
use crate::data_io::{AugmentConfig, DatasetSpec};
use crate::ddm::default_timesteps;
use crate::denoiser::Architecture;
use crate::diffusion::{BetaDirection, NoiseSchedule};
use crate::error::{HdmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub direction: BetaDirection,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            direction: BetaDirection::Increasing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub widths: Vec<usize>,
    pub taps: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            widths: vec![16, 32, 32],
            taps: 3,
            time_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DagmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub lambda: f64,
    pub norm_momentum: f64,
    /// Noising depth before perturbed denoising, as fractions of `T`.
    pub depth_range: [f64; 2],
    pub plan: PlanConfig,
}

impl Default for DagmConfig {
    fn default() -> Self {
        DagmConfig {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            lr_floor: 0.1,
            lambda: 1.0,
            norm_momentum: 0.05,
            depth_range: [0.5, 1.0],
            plan: PlanConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdmConfig {
    pub steps: usize,
    /// Normal/anomaly pairs per step.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    /// Guidance scale.
    pub s: f64,
    /// Feature timesteps; empty means `{T/4, T/2, 3T/4}`.
    pub timesteps: Vec<usize>,
    pub hidden: Vec<usize>,
    /// Synthesized pairs kept in the pool.
    pub pool_size: usize,
    /// Pool entries replaced with fresh syntheses each step.
    pub synth_per_step: usize,
    pub priors: [f64; 2],
}

impl Default for DdmConfig {
    fn default() -> Self {
        DdmConfig {
            steps: 3000,
            batch_size: 8,
            lr: 1e-3,
            lr_floor: 0.1,
            s: 1.0,
            timesteps: Vec::new(),
            hidden: vec![32],
            pool_size: 8,
            synth_per_step: 8,
            priors: [0.5, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PomConfig {
    pub gamma: f64,
    pub decay: f64,
}

impl Default for PomConfig {
    fn default() -> Self {
        PomConfig { gamma: 2.0, decay: 0.9 }
    }
}

/// Weights of the three objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub category: String,
    pub resolution: usize,
    pub channels: usize,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            category: String::new(),
            resolution: 64,
            channels: 1,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Feature noise draws averaged per image.
    pub feature_draws: usize,
    /// Training normals used to fit the feature and map statistics.
    pub calibration_images: usize,
    pub pro_fpr: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            feature_draws: 1,
            calibration_images: 32,
            pro_fpr: 0.3,
        }
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub dagm: DagmConfig,
    pub ddm: DdmConfig,
    pub pom: PomConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub infer: InferConfig,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            dagm: DagmConfig::default(),
            ddm: DdmConfig::default(),
            pom: PomConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            infer: InferConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

/// Settings reported for the full-scale setup (256×256, 50k/20k steps,
/// batch 32, learning rate 1e-5). Not exercised by the tests.
pub fn full_scale() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.data.resolution = 256;
    c.dataset.resolution = 256;
    c.diffusion.steps = 1000;
    c.dagm.steps = 50_000;
    c.ddm.steps = 20_000;
    c.dagm.batch_size = 32;
    c.ddm.batch_size = 16;
    c.ddm.pool_size = 16;
    c.ddm.synth_per_step = 16;
    c.dagm.lr = 1e-5;
    c.ddm.lr = 1e-5;
    c.denoiser.widths = vec![32, 64, 64, 128];
    c
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| HdmError::param(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HdmError::load(path, e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let d = &self.diffusion;
        NoiseSchedule::linear(d.steps, d.beta_start, d.beta_end, d.direction)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            in_channels: self.data.channels,
            height: self.data.resolution,
            width: self.data.resolution,
            widths: self.denoiser.widths.clone(),
            taps: self.denoiser.taps,
            time_dim: self.denoiser.time_dim,
        }
    }

    pub fn feature_timesteps(&self) -> Vec<usize> {
        if self.ddm.timesteps.is_empty() {
            default_timesteps(self.diffusion.steps)
        } else {
            self.ddm.timesteps.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.architecture().validate()?;
        self.dagm.plan.validate()?;
        self.data.augment.validate()?;
        let l = &self.loss;
        if [l.lambda1, l.lambda2, l.lambda3].iter().any(|v| !(*v >= 0.0)) {
            return Err(HdmError::param("loss weights must be non-negative"));
        }
        if self.dagm.batch_size == 0 || self.ddm.batch_size == 0 {
            return Err(HdmError::param("batch sizes must be positive"));
        }
        if self.ddm.pool_size < self.ddm.batch_size {
            return Err(HdmError::param("pool_size must be at least the ddm batch size"));
        }
        if self.ddm.synth_per_step > self.ddm.pool_size {
            return Err(HdmError::param("synth_per_step cannot exceed pool_size"));
        }
        let [d0, d1] = self.dagm.depth_range;
        if !(0.0 < d0 && d0 <= d1 && d1 <= 1.0) {
            return Err(HdmError::param("depth_range must satisfy 0 < lo <= hi <= 1"));
        }
        if !(self.ddm.s >= 0.0) {
            return Err(HdmError::param("guidance scale must be non-negative"));
        }
        if !(self.pom.gamma > 0.0) || !(self.pom.decay > 0.0 && self.pom.decay < 1.0) {
            return Err(HdmError::param("pom.gamma must be positive and pom.decay in (0, 1)"));
        }
        let t = self.diffusion.steps;
        if self.feature_timesteps().iter().any(|s| *s == 0 || *s > t) {
            return Err(HdmError::param(format!("feature timesteps must lie in 1..={t}")));
        }
        if self.ddm.hidden.contains(&0) {
            return Err(HdmError::param("classifier widths must be positive"));
        }
        if self.infer.feature_draws == 0 {
            return Err(HdmError::param("feature_draws must be positive"));
        }
        if !(self.infer.pro_fpr > 0.0 && self.infer.pro_fpr <= 1.0) {
            return Err(HdmError::param("pro_fpr must be in (0, 1]"));
        }
        Ok(())
    }
}
