//! End-to-end command-line tests: the staged training flow, artifact
//! layout, and the error contract (exit 2 with the offending key for bad
//! configuration, ordered-stage rejections by name).

use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
[world]
seed = 910
image_size = 32

[model]
base_width = 8
seed = 911

[diffusion]
train_steps = 60

[sampler]
steps = 3
guidance_scale = 1.5

[dataset]
n_identities = 4
views_per_identity = 2
seed = 912

[stage1]
steps = 8
lr = 0.01
seed = 913

[stage2_aging]
steps = 8
lr = 0.001
seed = 914

[stage2_view]
steps = 6
lr = 0.001
seed = 915
n_identities = 2
views_per_identity = 2

[stage2_ctrl]
steps = 6
lr = 0.001
seed = 916

[stage3]
steps = 5
lr = 0.001
seed = 917
frames = 2

[eval]
n_subjects = 1
seed = 918
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ageview"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_in(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_documents_every_config_section() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "[world]",
        "[model]",
        "[diffusion]",
        "[sampler]",
        "[dataset]",
        "[stage1]",
        "[stage2_aging]",
        "[stage2_view]",
        "[stage2_ctrl]",
        "[stage3]",
        "[eval]",
        "guidance_scale",
        "n_subjects",
    ] {
        assert!(text.contains(needle), "--help must document {needle}");
    }
}

#[test]
fn malformed_config_exits_two_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[world]\nimage_size = 17\n").unwrap();
    let out = run_in(dir.path(), &["--config", "bad.toml", "train", "--stage", "modulator", "--checkpoint", "ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("world.image_size"), "stderr must name the key: {err}");

    std::fs::write(dir.path().join("junk.toml"), "not toml at all [").unwrap();
    let out = run_in(dir.path(), &["--config", "junk.toml", "train", "--stage", "modulator", "--checkpoint", "ckpt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stages_out_of_order_fail_with_named_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY_CONFIG).unwrap();

    let out = run_in(dir.path(), &["--config", "run.toml", "train", "--stage", "aging", "--checkpoint", "ckpt", "--dataset", "data"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train --stage modulator creates one"), "got: {err}");

    ok_in(dir.path(), &["--config", "run.toml", "train", "--stage", "modulator", "--checkpoint", "ckpt"]);
    let out = run_in(dir.path(), &["--config", "run.toml", "train", "--stage", "controller", "--checkpoint", "ckpt", "--dataset", "data"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("\"view-finetune\""), "must name the missing stage: {err}");
}

#[test]
fn the_full_flow_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.toml"), TINY_CONFIG).unwrap();
    let cfg = ["--config", "run.toml"];

    ok_in(root, &[&cfg[..], &["train", "--stage", "modulator", "--checkpoint", "ckpt"]].concat());
    ok_in(root, &[&cfg[..], &["generate-dataset", "--checkpoint", "ckpt", "--out", "data"]].concat());
    ok_in(root, &[&cfg[..], &["train", "--stage", "aging", "--checkpoint", "ckpt", "--dataset", "data"]].concat());
    ok_in(root, &[&cfg[..], &["train", "--stage", "view-finetune", "--checkpoint", "ckpt"]].concat());
    ok_in(root, &[&cfg[..], &["train", "--stage", "controller", "--checkpoint", "ckpt", "--dataset", "data"]].concat());
    let out = ok_in(root, &[&cfg[..], &["train", "--stage", "temporal", "--checkpoint", "ckpt", "--dataset", "data"]].concat());
    let last: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(last["stage"], "temporal");

    // Checkpoint layout and per-stage logs.
    assert!(root.join("ckpt/meta.json").is_file());
    assert!(root.join("ckpt/params.bin").is_file());
    let log = std::fs::read_to_string(root.join("ckpt/train-aging.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8, "one JSONL line per step");
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["loss"].is_f64());
    let mod_log = std::fs::read_to_string(root.join("ckpt/train-modulator.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(mod_log.lines().next().unwrap()).unwrap();
    assert!(first["age"].is_f64(), "modulator log carries the loss terms");

    // Dataset manifest exists and the header line parses.
    let manifest = std::fs::read_to_string(root.join("data/manifest.jsonl")).unwrap();
    assert!(manifest.lines().next().unwrap().contains("\"header\""));

    // Sampling: a three-frame sweep plus grid.
    let out = ok_in(
        root,
        &[&cfg[..], &[
            "sample", "--checkpoint", "ckpt", "--source-seed", "7", "--age", "60",
            "--pose-sweep=-0.4:0.4:3", "--seed", "3", "--out", "frames",
        ]].concat(),
    );
    let meta: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(meta["frames"].as_array().unwrap().len(), 3);
    assert!(root.join("frames/frame_02.png").is_file());
    assert!(root.join("frames/grid.png").is_file());
    assert_eq!(meta["measurements"].as_array().unwrap().len(), 3);

    // Evaluation report with the imported comparison rows.
    ok_in(root, &[&cfg[..], &["eval", "--checkpoint", "ckpt", "--out", "report.json"]].concat());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    assert!(report["age_mae"].is_f64());
    assert_eq!(report["pose_rows"].as_array().unwrap().len(), 8);
    assert_eq!(report["use_controller"], true);
    assert_eq!(report["use_temporal"], true);
    let reference = report["reference"].as_array().unwrap();
    assert_eq!(reference.len(), 5);
    assert!(reference[0]["note"]
        .as_str()
        .unwrap()
        .contains("original full-scale study"));

    // Contact sheet over the sampled frames.
    ok_in(root, &[&cfg[..], &["report", "--images", "frames", "--cols", "2", "--out", "sheet.png"]].concat());
    assert!(root.join("sheet.png").is_file());
}
