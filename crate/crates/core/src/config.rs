//! One TOML file of knobs for the whole pipeline: world, model widths,
//! schedules, per-stage optimizer settings, and evaluation size. Every field
//! has a default, so an empty file is a valid (desk-scale) run. Validation
//! names the offending dotted key.

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetConfig, Stage1Config};
use crate::diffusion::{DdimConfig, NoiseSchedule};
use crate::unet::UNetConfig;
use crate::world::{toy::ToyWorldConfig, World, WorldError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse: {0}")]
    Parse(String),
    #[error("invalid value for {key}: {msg}")]
    Invalid { key: String, msg: String },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub seed: u64,
    pub image_size: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        WorldSection { seed: 1000, image_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Channel width of the first UNet stage; doubled below it.
    pub base_width: usize,
    /// Learn separate key/value maps for injected reference tokens instead
    /// of sharing the self-attention ones.
    pub separate_ref_kv: bool,
    /// Seed for backbone and branch initialization.
    pub seed: u64,
    /// Denoising steps that season the backbone before it freezes and the
    /// replicas copy from it (the stand-in for downloading pretrained
    /// weights).
    pub pretrain_steps: usize,
    /// Learning rate of that pretraining phase.
    pub pretrain_lr: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            base_width: 32,
            separate_ref_kv: false,
            seed: 2000,
            pretrain_steps: 400,
            pretrain_lr: 2e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    /// Training timesteps T.
    pub train_steps: usize,
    /// Terminal cumulative signal level.
    pub alpha_min: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection { train_steps: 1000, alpha_min: 0.0025 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub guidance_scale: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { steps: 100, guidance_scale: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_identities: usize,
    pub views_per_identity: usize,
    pub ages_per_identity: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        DatasetSection {
            n_identities: d.n_identities,
            views_per_identity: d.views_per_identity,
            ages_per_identity: d.ages_per_identity,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Stage1Section {
    fn default() -> Self {
        let d = Stage1Config::default();
        Stage1Section { steps: d.steps, lr: d.lr, seed: d.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgingStageSection {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AgingStageSection {
    fn default() -> Self {
        AgingStageSection { steps: 300, lr: 1e-3, seed: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewStageSection {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Identities rendered for view-pair fine-tuning.
    pub n_identities: usize,
    pub views_per_identity: usize,
}

impl Default for ViewStageSection {
    fn default() -> Self {
        ViewStageSection { steps: 200, lr: 1e-3, seed: 8, n_identities: 6, views_per_identity: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtrlStageSection {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CtrlStageSection {
    fn default() -> Self {
        CtrlStageSection { steps: 200, lr: 1e-3, seed: 9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalStageSection {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Frames per temporal training group.
    pub frames: usize,
}

impl Default for TemporalStageSection {
    fn default() -> Self {
        TemporalStageSection { steps: 150, lr: 1e-3, seed: 10, frames: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Held-out subjects scored by the evaluation protocol.
    pub n_subjects: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n_subjects: 16, seed: 99 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldSection,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub sampler: SamplerSection,
    pub dataset: DatasetSection,
    pub stage1: Stage1Section,
    pub stage2_aging: AgingStageSection,
    pub stage2_view: ViewStageSection,
    pub stage2_ctrl: CtrlStageSection,
    pub stage3: TemporalStageSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), source: e })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = self.world.image_size;
        if s % 16 != 0 || !(s / 16).is_power_of_two() {
            return Err(invalid(
                "world.image_size",
                format!("must be 16 times a power of two, got {s}"),
            ));
        }
        if self.model.base_width == 0 || self.model.base_width % 8 != 0 {
            return Err(invalid(
                "model.base_width",
                format!("must be a positive multiple of 8, got {}", self.model.base_width),
            ));
        }
        if !(self.model.pretrain_lr.is_finite() && self.model.pretrain_lr > 0.0) {
            return Err(invalid(
                "model.pretrain_lr",
                format!("must be positive, got {}", self.model.pretrain_lr),
            ));
        }
        if self.diffusion.train_steps == 0 {
            return Err(invalid("diffusion.train_steps", "must be positive"));
        }
        if !(self.diffusion.alpha_min > 0.0 && self.diffusion.alpha_min < 1.0) {
            return Err(invalid(
                "diffusion.alpha_min",
                format!("must lie in (0, 1), got {}", self.diffusion.alpha_min),
            ));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.diffusion.train_steps {
            return Err(invalid(
                "sampler.steps",
                format!(
                    "must lie in [1, diffusion.train_steps = {}], got {}",
                    self.diffusion.train_steps, self.sampler.steps
                ),
            ));
        }
        if !(self.sampler.guidance_scale.is_finite() && self.sampler.guidance_scale >= 0.0) {
            return Err(invalid(
                "sampler.guidance_scale",
                format!("must be finite and non-negative, got {}", self.sampler.guidance_scale),
            ));
        }
        self.dataset_config().validate().map_err(|e| invalid("dataset", e.to_string()))?;
        for (key, steps, lr) in [
            ("stage1", self.stage1.steps, self.stage1.lr),
            ("stage2_aging", self.stage2_aging.steps, self.stage2_aging.lr),
            ("stage2_view", self.stage2_view.steps, self.stage2_view.lr),
            ("stage2_ctrl", self.stage2_ctrl.steps, self.stage2_ctrl.lr),
            ("stage3", self.stage3.steps, self.stage3.lr),
        ] {
            if steps == 0 {
                return Err(invalid(&format!("{key}.steps"), "must be positive"));
            }
            if !(lr.is_finite() && lr > 0.0) {
                return Err(invalid(&format!("{key}.lr"), format!("must be positive, got {lr}")));
            }
        }
        if self.stage2_view.n_identities == 0 || self.stage2_view.views_per_identity == 0 {
            return Err(invalid(
                "stage2_view.n_identities",
                "identities and views per identity must be positive",
            ));
        }
        if self.stage3.frames == 0 {
            return Err(invalid("stage3.frames", "must be positive"));
        }
        if self.stage3.frames > self.dataset.views_per_identity {
            return Err(invalid(
                "stage3.frames",
                format!(
                    "must not exceed dataset.views_per_identity = {}, got {}",
                    self.dataset.views_per_identity, self.stage3.frames
                ),
            ));
        }
        if self.eval.n_subjects == 0 {
            return Err(invalid("eval.n_subjects", "must be positive"));
        }
        Ok(())
    }

    // ---- component builders -------------------------------------------------

    pub fn toy_world_config(&self) -> ToyWorldConfig {
        ToyWorldConfig {
            image_size: self.world.image_size,
            ..ToyWorldConfig::new(self.world.seed)
        }
    }

    pub fn build_world<S: crate::Scalar>(&self) -> Result<World<S>, WorldError> {
        World::from_registry(&Default::default(), &self.toy_world_config())
    }

    /// Backbone configuration (the aging and view variants derive from it).
    pub fn base_unet(&self) -> UNetConfig {
        UNetConfig {
            base_width: self.model.base_width,
            separate_ref_kv: self.model.separate_ref_kv,
            ..UNetConfig::default()
        }
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(self.diffusion.train_steps, self.diffusion.alpha_min)
    }

    pub fn ddim(&self) -> DdimConfig {
        DdimConfig { steps: self.sampler.steps, guidance_scale: self.sampler.guidance_scale }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            world_seed: self.world.seed,
            n_identities: self.dataset.n_identities,
            views_per_identity: self.dataset.views_per_identity,
            ages_per_identity: self.dataset.ages_per_identity,
            seed: self.dataset.seed,
        }
    }

    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config { steps: self.stage1.steps, lr: self.stage1.lr, seed: self.stage1.seed }
    }
}
