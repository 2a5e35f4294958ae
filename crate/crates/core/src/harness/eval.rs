//! Evaluation protocol: fresh subjects the training never saw, scored for
//! aging accuracy, identity preservation, viewpoint accuracy on held-out
//! perimeter poses, cross-view consistency, and the large-gap protocol.
//! Every random draw comes from the evaluation seed, so a rerun of the
//! same configuration reproduces the report byte for byte.

use super::sample::{sample_multiview, MultiviewSample, SampleOpts};
use crate::aging::AgingBundle;
use crate::diffusion::{DdimConfig, NoiseSchedule};
use crate::viewpoint::{POSE_RANGE_AZ, POSE_RANGE_PO};
use crate::world::{Pose, World, WorldError};
use ageview_autograd::{ParamStore, Scalar};
use ndarray::ArrayD;

/// Labels the imported comparison rows in every report.
pub const REFERENCE_NOTE: &str =
    "reference values from the original full-scale study (not reproducible at desk scale)";

/// Age targets cycled across subjects, one bucket each.
pub const AGE_TARGETS: [i64; 4] = [20, 40, 60, 80];

/// Large-gap transfers: (source age, target age).
pub const LARGE_GAPS: [(i64, i64); 4] = [(0, 30), (0, 70), (70, 30), (70, 0)];

/// The eight held-out poses: corners and edge midpoints of the training
/// pose box. Training draws from the box interior, so its perimeter is
/// never seen during training.
pub fn perimeter_poses() -> [Pose; 8] {
    let (a, p) = (POSE_RANGE_AZ, POSE_RANGE_PO);
    [
        Pose::new(-a, -p),
        Pose::new(-a, 0.0),
        Pose::new(-a, p),
        Pose::new(0.0, p),
        Pose::new(a, p),
        Pose::new(a, 0.0),
        Pose::new(a, -p),
        Pose::new(0.0, -p),
    ]
}

#[derive(Debug, Clone)]
pub struct EvalOpts {
    /// Subjects scored; each contributes one 8-view stack.
    pub n_subjects: usize,
    pub seed: u64,
    pub ddim: DdimConfig,
    pub use_controller: bool,
    pub use_temporal: bool,
    /// Score the four large-gap transfers (adds 4 single-frame samples per
    /// subject).
    pub with_large_gap: bool,
    /// Score the image-conditioning arm's viewpoint accuracy (requires a
    /// trained `ctrlrgb.` family; adds one 8-view stack per subject).
    pub with_ablation: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AgeRow {
    pub target: i64,
    pub mae: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseRow {
    pub azimuth: f64,
    pub polar: f64,
    pub sq_err: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GapRow {
    pub from: i64,
    pub to: i64,
    pub mean_abs_err: f64,
    pub std_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReferenceRow {
    pub metric: String,
    pub value: f64,
    pub note: String,
}

/// The full evaluation result. Field order is fixed; serializing the same
/// run twice yields identical bytes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub n_subjects: usize,
    pub seed: u64,
    pub sampler_steps: usize,
    pub guidance_scale: f64,
    pub use_controller: bool,
    pub use_temporal: bool,
    /// Mean |target - predicted age| over all scored frames, years.
    pub age_mae: f64,
    pub age_rows: Vec<AgeRow>,
    /// Mean cosine between input and output identity embeddings.
    pub identity_cosine: f64,
    /// Mean pairwise cosine across the 8 views of one subject.
    pub cross_view_cosine: f64,
    /// Mean squared (azimuth, polar) error on the held-out poses, rad².
    pub pose_l2_rad2: f64,
    pub pose_rows: Vec<PoseRow>,
    pub large_gap: Vec<GapRow>,
    /// Viewpoint accuracy of the image-conditioning arm, when scored.
    pub ablation_pose_l2_rad2: Option<f64>,
    pub reference: Vec<ReferenceRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn cosine<S: Scalar>(a: &ArrayD<S>, b: &ArrayD<S>) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-12)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn reference_rows() -> Vec<ReferenceRow> {
    let row = |metric: &str, value: f64| ReferenceRow {
        metric: metric.into(),
        value,
        note: REFERENCE_NOTE.into(),
    };
    vec![
        row("aging accuracy (mean absolute error, years)", 7.46),
        row("identity preservation (cosine similarity)", 0.68),
        row("viewpoint accuracy (mean squared pose error, rad^2)", 0.0092),
        row("viewpoint accuracy with pose-token conditioning (rad^2)", 0.0092),
        row("viewpoint accuracy with image conditioning (rad^2)", 0.022),
    ]
}

/// Run the protocol. Subjects are drawn from the evaluation seed and are
/// unrelated to dataset or fine-tune identities.
pub fn evaluate<S: Scalar>(
    world: &World<S>,
    store: &ParamStore<S>,
    bundle: &AgingBundle,
    sched: &NoiseSchedule,
    opts: &EvalOpts,
) -> Result<EvalReport, WorldError> {
    assert!(opts.n_subjects >= 1);
    let poses = perimeter_poses();
    let mut age_errs: Vec<Vec<f64>> = vec![Vec::new(); AGE_TARGETS.len()];
    let mut id_cosines = Vec::new();
    let mut pair_cosines = Vec::new();
    let mut pose_errs: Vec<Vec<f64>> = vec![Vec::new(); poses.len()];
    let mut gap_errs: Vec<Vec<f64>> = vec![Vec::new(); LARGE_GAPS.len()];
    let mut ablation_errs = Vec::new();

    for subject in 0..opts.n_subjects {
        let subj_seed =
            opts.seed.wrapping_add((subject as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let code = world.sample_latent(subj_seed);
        let source = world.render_array(&code.styles, Pose::frontal())?;
        let source_id = world.embed_identity_array(&source);
        let bucket = subject % AGE_TARGETS.len();
        let target_age = AGE_TARGETS[bucket];

        let mut view_opts = SampleOpts::new(
            target_age as f64,
            poses.to_vec(),
            opts.ddim.clone(),
            subj_seed ^ 0x5A17,
        );
        view_opts.use_controller = opts.use_controller;
        view_opts.use_temporal = opts.use_temporal;
        let stack: MultiviewSample<S> =
            sample_multiview(world, store, bundle, sched, &source, &view_opts)?;

        let mut ids = Vec::with_capacity(stack.images.len());
        for (frame, img) in stack.images.iter().enumerate() {
            age_errs[bucket]
                .push((world.predict_age_array(img) - target_age as f64).abs());
            let est = world.estimate_pose_array(img);
            pose_errs[frame].push(est.l2(&poses[frame]));
            let id = world.embed_identity_array(img);
            id_cosines.push(cosine(&source_id, &id));
            ids.push(id);
        }
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                pair_cosines.push(cosine(&ids[i], &ids[j]));
            }
        }

        if opts.with_large_gap {
            for (gi, (from, to)) in LARGE_GAPS.iter().enumerate() {
                let w_src = world.generator.latent_with_age(&code.styles, *from as f64);
                let src_img = world.render_array(&w_src, Pose::frontal())?;
                let mut gap_opts = SampleOpts::new(
                    *to as f64,
                    vec![Pose::frontal()],
                    opts.ddim.clone(),
                    subj_seed ^ (0x6A70 + gi as u64),
                );
                gap_opts.use_controller = opts.use_controller;
                let one = sample_multiview(world, store, bundle, sched, &src_img, &gap_opts)?;
                gap_errs[gi].push((world.predict_age_array(&one.images[0]) - *to as f64).abs());
            }
        }

        if opts.with_ablation {
            let mut rgb_opts = SampleOpts::new(
                target_age as f64,
                poses.to_vec(),
                opts.ddim.clone(),
                subj_seed ^ 0xAB1A,
            );
            rgb_opts.rgb_condition = true;
            rgb_opts.use_temporal = opts.use_temporal;
            let stack = sample_multiview(world, store, bundle, sched, &source, &rgb_opts)?;
            for (frame, img) in stack.images.iter().enumerate() {
                let est = world.estimate_pose_array(img);
                ablation_errs.push(est.l2(&poses[frame]));
            }
        }
    }

    let all_age: Vec<f64> = age_errs.iter().flatten().copied().collect();
    let age_rows = AGE_TARGETS
        .iter()
        .zip(&age_errs)
        .filter(|(_, errs)| !errs.is_empty())
        .map(|(t, errs)| AgeRow { target: *t, mae: mean(errs), n: errs.len() })
        .collect();
    let all_pose: Vec<f64> = pose_errs.iter().flatten().copied().collect();
    let pose_rows = poses
        .iter()
        .zip(&pose_errs)
        .map(|(p, errs)| PoseRow { azimuth: p.azimuth, polar: p.polar, sq_err: mean(errs) })
        .collect();
    let large_gap = if opts.with_large_gap {
        LARGE_GAPS
            .iter()
            .zip(&gap_errs)
            .map(|((from, to), errs)| GapRow {
                from: *from,
                to: *to,
                mean_abs_err: mean(errs),
                std_abs_err: std_dev(errs),
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(EvalReport {
        n_subjects: opts.n_subjects,
        seed: opts.seed,
        sampler_steps: opts.ddim.steps,
        guidance_scale: opts.ddim.guidance_scale,
        use_controller: opts.use_controller,
        use_temporal: opts.use_temporal,
        age_mae: mean(&all_age),
        age_rows,
        identity_cosine: mean(&id_cosines),
        cross_view_cosine: mean(&pair_cosines),
        pose_l2_rad2: mean(&all_pose),
        pose_rows,
        large_gap,
        ablation_pose_l2_rad2: if opts.with_ablation {
            Some(mean(&ablation_errs))
        } else {
            None
        },
        reference: reference_rows(),
    })
}
