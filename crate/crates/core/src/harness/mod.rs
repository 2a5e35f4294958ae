//! Training harness: stage ordering, freeze contracts, checkpoints,
//! multiview sampling, and the evaluation protocol.
//!
//! The system trains in a fixed sequence. The age modulator comes first and
//! turns the generator into a dataset factory. The reference-conditioned
//! aging denoiser trains on that dataset. The view model fine-tunes the
//! backbone for pose control, the controller branch is grafted from it, and
//! frame attention comes last. Each stage touches exactly one parameter
//! prefix; everything else is checksummed before and after, and any drift is
//! an error, not a warning.

pub mod checkpoint;
pub mod eval;
pub mod report;
pub mod sample;
pub mod stages;

pub use checkpoint::{load_checkpoint_store, save_checkpoint, CheckpointError, CheckpointMeta};
pub use eval::{evaluate, perimeter_poses, EvalOpts, EvalReport, REFERENCE_NOTE};
pub use report::{image_grid, save_grid_png, save_image_png};
pub use sample::{sample_multiview, MultiviewSample, SampleOpts};

use crate::aging::{AgingBundle, BASE_PREFIX};
use crate::config::{ConfigError, RunConfig};
use crate::dataset::{
    generate_dataset, train_stage1, Dataset, DatasetError, DatasetHeader, TrainError,
};
use crate::losses::LossReport;
use crate::modulation::{AgeModConfig, AgeModulator};
use crate::temporal::init_temporal_site;
use crate::unet::{init_unet, site_widths};
use crate::viewpoint::{
    attach_controller_at, finetune_view_model, make_view_pairs, ViewBundle, CTRL_PREFIX,
};
use crate::world::{World, WorldError};
use ageview_autograd::store::seeded;
use ageview_autograd::{ParamStore, Scalar};
use std::path::Path;

/// Parameter prefix of the image-conditioning experiment arm (trained by
/// [`stages::train_rgb_arm`], outside the stage sequence).
pub const CTRL_RGB_PREFIX: &str = "ctrlrgb";

/// Every parameter family the store may hold, with the trailing dot that
/// separates prefixes from names.
pub const PARAM_FAMILIES: [&str; 7] =
    ["base.", "agemod.", "aging.", "view.", "ctrl.", "ctrlrgb.", "temporal."];

/// The training stages, in their only legal order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Latent age modulation (the dataset factory).
    Modulator,
    /// Reference-conditioned aging denoiser.
    Aging,
    /// Multiview fine-tune of the backbone copy.
    ViewFinetune,
    /// Zero-initialized viewpoint controller.
    Controller,
    /// Frame attention for cross-view consistency.
    Temporal,
}

impl Stage {
    pub const ALL: [Stage; 5] =
        [Stage::Modulator, Stage::Aging, Stage::ViewFinetune, Stage::Controller, Stage::Temporal];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Modulator => "modulator",
            Stage::Aging => "aging",
            Stage::ViewFinetune => "view-finetune",
            Stage::Controller => "controller",
            Stage::Temporal => "temporal",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    /// The one prefix a stage is allowed to modify (trailing dot included).
    pub fn trainable_prefix(self) -> &'static str {
        match self {
            Stage::Modulator => "agemod.",
            Stage::Aging => "aging.",
            Stage::ViewFinetune => "view.",
            Stage::Controller => "ctrl.",
            Stage::Temporal => "temporal.",
        }
    }

    /// The stage that must complete before this one may start.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Modulator => None,
            Stage::Aging => Some(Stage::Modulator),
            Stage::ViewFinetune => Some(Stage::Aging),
            Stage::Controller => Some(Stage::ViewFinetune),
            Stage::Temporal => Some(Stage::Controller),
        }
    }

    /// Whether the stage consumes the generated dataset.
    pub fn needs_dataset(self) -> bool {
        matches!(self, Stage::Aging | Stage::Controller | Stage::Temporal)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("stage \"{stage}\" requires completed stage \"{missing}\" first")]
    MissingStage { stage: &'static str, missing: &'static str },
    #[error("stage \"{stage}\" already completed; checkpoints are append-only")]
    AlreadyCompleted { stage: &'static str },
    #[error("stage \"{stage}\" trains on the generated dataset; pass one")]
    DatasetRequired { stage: &'static str },
    #[error("frozen parameters under \"{prefix}\" changed during stage \"{stage}\"")]
    FreezeViolation { stage: &'static str, prefix: &'static str },
    #[error("unknown stage \"{0}\"; expected one of modulator, aging, view-finetune, controller, temporal")]
    UnknownStage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Per-step record of one diffusion-stage training step (JSONL line).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
}

/// What one completed stage reports back.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: Stage,
    /// Per-step losses (the modulator stage's totals, or plain MSE).
    pub losses: Vec<f64>,
    /// Six-term breakdown, modulator stage only.
    pub term_reports: Option<Vec<LossReport>>,
    /// Lineage hash after the stage committed.
    pub lineage: String,
}

impl StageReport {
    pub fn first_loss(&self) -> f64 {
        *self.losses.first().expect("stage ran at least one step")
    }
    pub fn last_loss(&self) -> f64 {
        *self.losses.last().expect("stage ran at least one step")
    }
}

/// Everything a run owns: configuration, world adapters, model
/// configurations, the parameter store, and the stage ledger.
pub struct Pipeline<S: Scalar> {
    pub cfg: RunConfig,
    pub world: World<S>,
    pub bundle: AgingBundle,
    pub view: ViewBundle,
    pub modulator: AgeModulator,
    pub store: ParamStore<S>,
    pub completed: Vec<Stage>,
    pub lineage: String,
}

impl<S: Scalar> Pipeline<S> {
    /// Fresh pipeline: backbone, replica, and view copies initialized from
    /// `cfg.model.seed`; controller and frame attention attach at their
    /// stages.
    ///
    /// Construction pretrains the backbone for `cfg.model.pretrain_steps`
    /// denoising steps before the replica and view copies clone it — the
    /// stand-in for loading pretrained weights. Everything after this point
    /// treats `base.` as frozen.
    pub fn new(cfg: RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let world = cfg.build_world::<S>()?;
        let mut store = ParamStore::new();
        let mut rng = seeded(cfg.model.seed);
        let (rows, cols) = world.generator.latent_shape();
        let mod_cfg =
            AgeModConfig { rows, cols, embed_dim: world.clip.dim(), ..AgeModConfig::default() };
        let modulator = AgeModulator::init(mod_cfg, &mut store, &mut rng);
        let base = cfg.base_unet();
        init_unet(&mut store, &mut rng, BASE_PREFIX, &base);
        stages::pretrain_base(
            &mut store,
            &world,
            &base,
            &cfg.schedule(),
            &stages::DiffStageOpts {
                steps: cfg.model.pretrain_steps,
                lr: cfg.model.pretrain_lr,
                seed: cfg.model.seed ^ 0xBA5E,
            },
        )?;
        let bundle = AgingBundle::replicate_from_base(&mut store, &mut rng, &base);
        let view = ViewBundle::init(&mut store, &mut rng, &base);
        let lineage = checkpoint::lineage_root(&store.checksum());
        Ok(Pipeline {
            cfg,
            world,
            bundle,
            view,
            modulator,
            store,
            completed: Vec::new(),
            lineage,
        })
    }

    /// Reassemble a pipeline around a loaded store and stage ledger.
    pub fn from_parts(
        cfg: RunConfig,
        store: ParamStore<S>,
        completed: Vec<Stage>,
        lineage: String,
    ) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let world = cfg.build_world::<S>()?;
        let (rows, cols) = world.generator.latent_shape();
        let mod_cfg =
            AgeModConfig { rows, cols, embed_dim: world.clip.dim(), ..AgeModConfig::default() };
        let modulator = AgeModulator { cfg: mod_cfg };
        let base = cfg.base_unet();
        let bundle = AgingBundle {
            base: base.clone(),
            aging: AgingBundle::aging_config(&base),
        };
        let view = ViewBundle { view: ViewBundle::view_config(&base) };
        Ok(Pipeline { cfg, world, bundle, view, modulator, store, completed, lineage })
    }

    pub fn is_completed(&self, stage: Stage) -> bool {
        self.completed.contains(&stage)
    }

    /// Render the training dataset. Requires a trained modulator.
    pub fn generate_dataset(&self, out_dir: &Path) -> Result<DatasetHeader, HarnessError> {
        if !self.is_completed(Stage::Modulator) {
            return Err(HarnessError::MissingStage { stage: "dataset", missing: "modulator" });
        }
        Ok(generate_dataset(
            &self.world,
            &self.modulator,
            &self.store,
            &self.cfg.dataset_config(),
            out_dir,
        )?)
    }

    /// Run one stage under the freeze contract and append it to the ledger.
    pub fn run_stage(
        &mut self,
        stage: Stage,
        dataset: Option<&Dataset<S>>,
    ) -> Result<StageReport, HarnessError> {
        if self.is_completed(stage) {
            return Err(HarnessError::AlreadyCompleted { stage: stage.name() });
        }
        if let Some(pre) = stage.prerequisite() {
            if !self.is_completed(pre) {
                return Err(HarnessError::MissingStage {
                    stage: stage.name(),
                    missing: pre.name(),
                });
            }
        }
        let ds = if stage.needs_dataset() {
            Some(dataset.ok_or(HarnessError::DatasetRequired { stage: stage.name() })?)
        } else {
            None
        };

        // New parameters must exist before the freeze snapshot so they land
        // in the trainable family, not in a frozen one.
        match stage {
            Stage::Controller => {
                if !self.store.contains(&format!("{CTRL_PREFIX}.proj.hi.w")) {
                    let mut rng = seeded(self.cfg.stage2_ctrl.seed ^ 0xC017);
                    attach_controller_at(&mut self.store, &mut rng, &self.bundle.base, CTRL_PREFIX);
                }
            }
            Stage::Temporal => {
                if !self.store.contains("temporal.d1.sa.wq.w") {
                    let mut rng = seeded(self.cfg.stage3.seed ^ 0x7E41);
                    for (site, c) in site_widths(&self.bundle.base) {
                        init_temporal_site(&mut self.store, &mut rng, &format!("temporal.{site}"), c);
                    }
                }
            }
            _ => {}
        }

        let frozen: Vec<&'static str> = PARAM_FAMILIES
            .into_iter()
            .filter(|p| *p != stage.trainable_prefix())
            .collect();
        let before: Vec<String> =
            frozen.iter().map(|p| self.store.checksum_prefix(p)).collect();

        let (losses, term_reports) = match stage {
            Stage::Modulator => {
                let reports = train_stage1(
                    &mut self.store,
                    &self.modulator,
                    &self.world,
                    &self.cfg.stage1_config(),
                )?;
                (reports.iter().map(|r| r.total).collect(), Some(reports))
            }
            Stage::Aging => {
                let sched = self.cfg.schedule();
                let s = &self.cfg.stage2_aging;
                let losses = stages::train_aging(
                    &mut self.store,
                    &self.world,
                    &self.bundle,
                    &sched,
                    ds.unwrap(),
                    &stages::DiffStageOpts { steps: s.steps, lr: s.lr, seed: s.seed },
                )?;
                (losses, None)
            }
            Stage::ViewFinetune => {
                let sched = self.cfg.schedule();
                let s = &self.cfg.stage2_view;
                let pairs = make_view_pairs(
                    &self.world,
                    s.n_identities,
                    s.views_per_identity,
                    s.seed,
                );
                let losses = finetune_view_model(
                    &mut self.store,
                    &self.view.view,
                    &sched,
                    &pairs,
                    s.steps,
                    s.lr,
                    s.seed,
                );
                (losses, None)
            }
            Stage::Controller => {
                let sched = self.cfg.schedule();
                let s = &self.cfg.stage2_ctrl;
                let losses = stages::train_controller(
                    &mut self.store,
                    &self.world,
                    &self.bundle,
                    &sched,
                    ds.unwrap(),
                    &stages::DiffStageOpts { steps: s.steps, lr: s.lr, seed: s.seed },
                )?;
                (losses, None)
            }
            Stage::Temporal => {
                let sched = self.cfg.schedule();
                let s = &self.cfg.stage3;
                let losses = stages::train_temporal(
                    &mut self.store,
                    &self.world,
                    &self.bundle,
                    &sched,
                    ds.unwrap(),
                    &stages::DiffStageOpts { steps: s.steps, lr: s.lr, seed: s.seed },
                    s.frames,
                )?;
                (losses, None)
            }
        };

        for (prefix, snap) in frozen.iter().zip(&before) {
            if self.store.checksum_prefix(prefix) != *snap {
                return Err(HarnessError::FreezeViolation { stage: stage.name(), prefix });
            }
        }

        self.completed.push(stage);
        self.lineage =
            checkpoint::lineage_step(&self.lineage, stage.name(), &self.store.checksum());
        Ok(StageReport { stage, losses, term_reports, lineage: self.lineage.clone() })
    }

    /// Attach and train the image-conditioning experiment arm
    /// (`ctrlrgb.`), the comparison twin of the pose-token controller.
    /// Mirrors the controller stage's budget and freeze contract but runs
    /// outside the stage ledger, so the product lineage never contains it.
    pub fn attach_and_train_rgb_arm(
        &mut self,
        dataset: &Dataset<S>,
    ) -> Result<Vec<f64>, HarnessError> {
        if !self.is_completed(Stage::Controller) {
            return Err(HarnessError::MissingStage { stage: "rgb-arm", missing: "controller" });
        }
        if !self.store.contains(&format!("{CTRL_RGB_PREFIX}.proj.hi.w")) {
            let mut rng = seeded(self.cfg.stage2_ctrl.seed ^ 0x9B0A);
            attach_controller_at(&mut self.store, &mut rng, &self.bundle.base, CTRL_RGB_PREFIX);
        }
        let frozen: Vec<&'static str> =
            PARAM_FAMILIES.into_iter().filter(|p| *p != "ctrlrgb.").collect();
        let before: Vec<String> =
            frozen.iter().map(|p| self.store.checksum_prefix(p)).collect();
        let sched = self.cfg.schedule();
        let s = &self.cfg.stage2_ctrl;
        let losses = stages::train_rgb_arm(
            &mut self.store,
            &self.world,
            &self.bundle,
            &sched,
            dataset,
            &stages::DiffStageOpts { steps: s.steps, lr: s.lr, seed: s.seed },
        )?;
        for (prefix, snap) in frozen.iter().zip(&before) {
            if self.store.checksum_prefix(prefix) != *snap {
                return Err(HarnessError::FreezeViolation { stage: "rgb-arm", prefix });
            }
        }
        Ok(losses)
    }

    /// Write the store and its manifest into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<CheckpointMeta, HarnessError> {
        Ok(save_checkpoint(
            dir,
            &self.store,
            &self.cfg,
            &self.completed,
            &self.lineage,
        )?)
    }

    /// Load a checkpoint saved under the same configuration.
    pub fn load_checkpoint(cfg: RunConfig, dir: &Path) -> Result<Self, HarnessError> {
        let (store, meta) = load_checkpoint_store::<S>(dir, &cfg)?;
        let completed = meta
            .completed_stages
            .iter()
            .map(|n| Stage::from_name(n).ok_or_else(|| HarnessError::UnknownStage(n.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Pipeline::from_parts(cfg, store, completed, meta.lineage)
    }
}

#[cfg(test)]
mod tests;
