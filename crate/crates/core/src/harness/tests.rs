use super::*;
use crate::dataset::Dataset;
use crate::harness::checkpoint::{lineage_root, lineage_step, STORE_FILE};
use crate::harness::eval::{evaluate, EvalOpts};
use crate::harness::sample::{sample_multiview, SampleOpts};
use crate::world::Pose;
use once_cell::sync::Lazy;
use std::path::PathBuf;

fn tiny_cfg() -> RunConfig {
    RunConfig::from_toml_str(
        r#"
        [world]
        seed = 900
        image_size = 32

        [model]
        base_width = 8
        seed = 901
        pretrain_steps = 30

        [diffusion]
        train_steps = 60

        [sampler]
        steps = 4
        guidance_scale = 1.5

        [dataset]
        n_identities = 4
        views_per_identity = 2
        seed = 902

        [stage1]
        steps = 12
        lr = 0.01
        seed = 903

        [stage2_aging]
        steps = 12
        lr = 0.001
        seed = 904

        [stage2_view]
        steps = 10
        lr = 0.001
        seed = 905
        n_identities = 2
        views_per_identity = 2

        [stage2_ctrl]
        steps = 10
        lr = 0.001
        seed = 906

        [stage3]
        steps = 8
        lr = 0.001
        seed = 907
        frames = 2

        [eval]
        n_subjects = 1
        seed = 908
    "#,
    )
    .unwrap()
}

/// One tiny end-to-end run shared by the structural tests: all five stages
/// on a four-identity dataset, with the parameter digest recorded after
/// every stage.
struct FullRun {
    pipeline: Pipeline<f64>,
    dataset: Dataset<f64>,
    dataset_dir: PathBuf,
    base_digest_at_init: String,
    digests_after: Vec<(Stage, String)>,
    _tmp: tempfile::TempDir,
}

static FULL_RUN: Lazy<FullRun> = Lazy::new(|| {
    let tmp = tempfile::tempdir().unwrap();
    let mut pipeline = Pipeline::<f64>::new(tiny_cfg()).unwrap();
    let base_digest_at_init = pipeline.store.checksum_prefix("base.");
    pipeline.run_stage(Stage::Modulator, None).unwrap();
    let dataset_dir = tmp.path().join("dataset");
    pipeline.generate_dataset(&dataset_dir).unwrap();
    let dataset = Dataset::<f64>::load(&dataset_dir).unwrap();
    let mut digests_after = vec![(Stage::Modulator, pipeline.store.checksum())];
    for stage in [Stage::Aging, Stage::ViewFinetune, Stage::Controller, Stage::Temporal] {
        pipeline.run_stage(stage, Some(&dataset)).unwrap();
        digests_after.push((stage, pipeline.store.checksum()));
    }
    FullRun { pipeline, dataset, dataset_dir, base_digest_at_init, digests_after, _tmp: tmp }
});

#[test]
fn stages_reject_missing_prerequisites_by_name() {
    let mut p = Pipeline::<f64>::new(tiny_cfg()).unwrap();
    match p.run_stage(Stage::Aging, None) {
        Err(HarnessError::MissingStage { stage, missing }) => {
            assert_eq!(stage, "aging");
            assert_eq!(missing, "modulator");
        }
        other => panic!("expected missing-stage error, got {other:?}"),
    }
    match p.run_stage(Stage::Temporal, None) {
        Err(HarnessError::MissingStage { stage, missing }) => {
            assert_eq!(stage, "temporal");
            assert_eq!(missing, "controller");
        }
        other => panic!("expected missing-stage error, got {other:?}"),
    }
    let dir = tempfile::tempdir().unwrap();
    match p.generate_dataset(dir.path()) {
        Err(HarnessError::MissingStage { stage, missing }) => {
            assert_eq!(stage, "dataset");
            assert_eq!(missing, "modulator");
        }
        other => panic!("expected missing-stage error, got {other:?}"),
    }
}

#[test]
fn dataset_stages_demand_a_dataset() {
    let run = &*FULL_RUN;
    // A fresh pipeline that has completed only the modulator.
    let mut p = Pipeline::<f64>::new(tiny_cfg()).unwrap();
    p.run_stage(Stage::Modulator, None).unwrap();
    match p.run_stage(Stage::Aging, None) {
        Err(HarnessError::DatasetRequired { stage }) => assert_eq!(stage, "aging"),
        other => panic!("expected dataset-required error, got {other:?}"),
    }
    // View fine-tuning renders its own pairs and takes no dataset.
    p.run_stage(Stage::Aging, Some(&run.dataset)).unwrap();
    p.run_stage(Stage::ViewFinetune, None).unwrap();
}

#[test]
fn completed_stages_cannot_rerun() {
    let mut p = Pipeline::<f64>::new(tiny_cfg()).unwrap();
    p.run_stage(Stage::Modulator, None).unwrap();
    match p.run_stage(Stage::Modulator, None) {
        Err(HarnessError::AlreadyCompleted { stage }) => assert_eq!(stage, "modulator"),
        other => panic!("expected already-completed error, got {other:?}"),
    }
}

#[test]
fn the_backbone_never_moves_across_the_whole_run() {
    let run = &*FULL_RUN;
    assert_eq!(
        run.pipeline.store.checksum_prefix("base."),
        run.base_digest_at_init,
        "frozen backbone drifted somewhere in the stage sequence"
    );
    assert_eq!(run.pipeline.completed, Stage::ALL.to_vec());
    // Controller and frame attention exist only after their stages.
    assert!(run.pipeline.store.contains("ctrl.proj.hi.w"));
    assert!(run.pipeline.store.contains("temporal.d1.sa.wq.w"));
}

#[test]
fn every_stage_changes_only_its_own_family() {
    let run = &*FULL_RUN;
    // Pairwise: the digest after stage k differs from after k-1 (training
    // moved something), and replaying the frozen-family digests is already
    // enforced inside run_stage — here we check the ledger ordering.
    let stages: Vec<Stage> = run.digests_after.iter().map(|(s, _)| *s).collect();
    assert_eq!(
        stages,
        vec![Stage::Modulator, Stage::Aging, Stage::ViewFinetune, Stage::Controller, Stage::Temporal]
    );
    for w in run.digests_after.windows(2) {
        assert_ne!(w[0].1, w[1].1, "stage {} left no trace", w[1].0);
    }
}

#[test]
fn stage_names_round_trip() {
    for s in Stage::ALL {
        assert_eq!(Stage::from_name(s.name()), Some(s));
    }
    assert_eq!(Stage::from_name("view-finetune"), Some(Stage::ViewFinetune));
    assert_eq!(Stage::from_name("nonsense"), None);
}

#[test]
fn lineage_is_a_replayable_hash_chain() {
    let run = &*FULL_RUN;
    let mut expect = lineage_root(&{
        // Root digest is of the freshly initialized store; rebuild it.
        let p = Pipeline::<f64>::new(tiny_cfg()).unwrap();
        p.store.checksum()
    });
    for (stage, digest) in &run.digests_after {
        expect = lineage_step(&expect, stage.name(), digest);
    }
    assert_eq!(run.pipeline.lineage, expect);
}

#[test]
fn checkpoints_round_trip_and_resume() {
    let run = &*FULL_RUN;
    let dir = tempfile::tempdir().unwrap();
    let meta = run.pipeline.save_checkpoint(dir.path()).unwrap();
    assert_eq!(meta.stage, "temporal");
    assert_eq!(meta.completed_stages.len(), 5);
    assert_eq!(meta.lineage, run.pipeline.lineage);

    let loaded = Pipeline::<f64>::load_checkpoint(tiny_cfg(), dir.path()).unwrap();
    assert_eq!(loaded.store.checksum(), run.pipeline.store.checksum());
    assert_eq!(loaded.completed, run.pipeline.completed);
    assert_eq!(loaded.lineage, run.pipeline.lineage);

    // A mid-run checkpoint resumes: save after the modulator, reload, and
    // run the next stage.
    let mut early = Pipeline::<f64>::new(tiny_cfg()).unwrap();
    early.run_stage(Stage::Modulator, None).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    early.save_checkpoint(dir2.path()).unwrap();
    let mut resumed = Pipeline::<f64>::load_checkpoint(tiny_cfg(), dir2.path()).unwrap();
    resumed.run_stage(Stage::Aging, Some(&run.dataset)).unwrap();
    assert_eq!(resumed.completed, vec![Stage::Modulator, Stage::Aging]);
}

#[test]
fn checkpoints_reject_tampering_and_config_drift() {
    let run = &*FULL_RUN;
    let dir = tempfile::tempdir().unwrap();
    run.pipeline.save_checkpoint(dir.path()).unwrap();

    let mut other_cfg = tiny_cfg();
    other_cfg.sampler.guidance_scale = 2.5;
    let err = Pipeline::<f64>::load_checkpoint(other_cfg, dir.path())
        .err()
        .expect("load with a drifted config must fail");
    match err {
        HarnessError::Checkpoint(CheckpointError::ConfigMismatch { .. }) => {}
        e => panic!("expected config mismatch, got {e:?}"),
    }

    let blob_path = dir.path().join(STORE_FILE);
    let mut blob = std::fs::read(&blob_path).unwrap();
    let last = blob.len() - 1;
    blob[last] ^= 0x40;
    std::fs::write(&blob_path, blob).unwrap();
    let err = Pipeline::<f64>::load_checkpoint(tiny_cfg(), dir.path())
        .err()
        .expect("load of a tampered blob must fail");
    match err {
        HarnessError::Checkpoint(CheckpointError::DigestMismatch { .. }) => {}
        e => panic!("expected digest mismatch, got {e:?}"),
    }
}

#[test]
fn dataset_regenerates_identically_from_the_same_pipeline() {
    let run = &*FULL_RUN;
    let dir = tempfile::tempdir().unwrap();
    // agemod. has not moved since generation (later stages froze it), so a
    // regeneration must reproduce the files byte for byte.
    run.pipeline.generate_dataset(dir.path()).unwrap();
    let a = std::fs::read(run.dataset_dir.join("manifest.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(a, b, "manifest bytes differ");
    for r in &run.dataset.records {
        let x = std::fs::read(run.dataset_dir.join(&r.file)).unwrap();
        let y = std::fs::read(dir.path().join(&r.file)).unwrap();
        assert_eq!(x, y, "record {} differs", r.file);
    }
}

#[test]
fn sampling_is_deterministic_and_seed_sensitive() {
    let run = &*FULL_RUN;
    let cfg = &run.pipeline.cfg;
    let sched = cfg.schedule();
    let world = &run.pipeline.world;
    let code = world.sample_latent(77_000);
    let source = world.render_array(&code.styles, Pose::frontal()).unwrap();
    let mut opts = SampleOpts::new(
        60.0,
        vec![Pose::frontal(), Pose::new(0.3, -0.1)],
        cfg.ddim(),
        5150,
    );
    opts.use_controller = true;
    opts.use_temporal = true;
    let a = sample_multiview(world, &run.pipeline.store, &run.pipeline.bundle, &sched, &source, &opts)
        .unwrap();
    let b = sample_multiview(world, &run.pipeline.store, &run.pipeline.bundle, &sched, &source, &opts)
        .unwrap();
    for (x, y) in a.latents.iter().zip(&b.latents) {
        assert_eq!(x, y, "same request must reproduce the same latents");
    }
    let mut opts2 = opts.clone();
    opts2.seed = 5151;
    let c = sample_multiview(world, &run.pipeline.store, &run.pipeline.bundle, &sched, &source, &opts2)
        .unwrap();
    assert_ne!(a.latents[0], c.latents[0], "a new seed must move the sample");
}

#[test]
fn zero_guidance_ignores_reference_and_controller() {
    let run = &*FULL_RUN;
    let cfg = &run.pipeline.cfg;
    let sched = cfg.schedule();
    let world = &run.pipeline.world;
    let code = world.sample_latent(77_001);
    let source = world.render_array(&code.styles, Pose::frontal()).unwrap();
    let mut ddim = cfg.ddim();
    ddim.guidance_scale = 0.0;
    let mut with_cond = SampleOpts::new(60.0, vec![Pose::new(0.2, 0.1)], ddim.clone(), 31);
    with_cond.use_controller = true;
    let mut without = SampleOpts::new(60.0, vec![Pose::new(0.2, 0.1)], ddim, 31);
    without.use_refs = false;
    let a = sample_multiview(world, &run.pipeline.store, &run.pipeline.bundle, &sched, &source, &with_cond)
        .unwrap();
    let b = sample_multiview(world, &run.pipeline.store, &run.pipeline.bundle, &sched, &source, &without)
        .unwrap();
    assert_eq!(
        a.latents[0], b.latents[0],
        "the unconditional branch must not see age or pose conditioning"
    );
}

#[test]
fn evaluation_reports_are_byte_identical_across_reruns() {
    let run = &*FULL_RUN;
    let cfg = &run.pipeline.cfg;
    let sched = cfg.schedule();
    let opts = EvalOpts {
        n_subjects: cfg.eval.n_subjects,
        seed: cfg.eval.seed,
        ddim: cfg.ddim(),
        use_controller: true,
        use_temporal: true,
        with_large_gap: true,
        with_ablation: false,
    };
    let a = evaluate(&run.pipeline.world, &run.pipeline.store, &run.pipeline.bundle, &sched, &opts)
        .unwrap();
    let b = evaluate(&run.pipeline.world, &run.pipeline.store, &run.pipeline.bundle, &sched, &opts)
        .unwrap();
    assert_eq!(a.to_json(), b.to_json(), "evaluation must be deterministic");
    assert!(a.to_json().starts_with("{\n  \"n_subjects\""), "field order is part of the format");
    assert_eq!(a.large_gap.len(), 4);
    assert_eq!(a.pose_rows.len(), 8);
    assert_eq!(a.reference.len(), 5);
    for row in &a.reference {
        assert_eq!(row.note, REFERENCE_NOTE);
    }
    assert!(a.age_mae.is_finite() && a.pose_l2_rad2.is_finite());
    assert!(a.identity_cosine <= 1.0 + 1e-12 && a.cross_view_cosine <= 1.0 + 1e-12);
}
