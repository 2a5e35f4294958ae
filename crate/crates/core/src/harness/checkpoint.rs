//! Checkpoints: the full parameter store (`params.bin`) plus a JSON
//! manifest (`meta.json`) recording the stage ledger, content digests, and
//! a lineage hash chain, so any checkpoint can prove which stages produced
//! it and that its bytes are intact.

use super::Stage;
use crate::config::RunConfig;
use crate::dataset::sha256_hex;
use ageview_autograd::{ParamStore, Scalar};
use std::path::Path;

pub const STORE_FILE: &str = "params.bin";
pub const META_FILE: &str = "meta.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    /// Name of the last committed stage, or "init".
    pub stage: String,
    /// Committed stages in execution order.
    pub completed_stages: Vec<String>,
    /// SHA-256 of the parameter store (names, shapes, f64 bits).
    pub params_sha256: String,
    /// SHA-256 of the canonical JSON of the run configuration.
    pub config_sha256: String,
    /// Hash chain: root = H("|init|" + params digest), then one
    /// H(parent + "|" + stage + "|" + params digest) link per stage.
    pub lineage: String,
}

pub fn config_digest(cfg: &RunConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

pub fn lineage_root(params_sha: &str) -> String {
    lineage_step("", "init", params_sha)
}

pub fn lineage_step(parent: &str, stage: &str, params_sha: &str) -> String {
    sha256_hex(format!("{parent}|{stage}|{params_sha}").as_bytes())
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint manifest {path}: {msg}")]
    Meta { path: String, msg: String },
    #[error(
        "parameter blob does not match its recorded digest \
         (manifest says {expected}, blob hashes to {actual})"
    )]
    DigestMismatch { expected: String, actual: String },
    #[error(
        "checkpoint was written under a different configuration \
         (manifest digest {expected}, this configuration {actual})"
    )]
    ConfigMismatch { expected: String, actual: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

/// Write `params.bin` and `meta.json` into `dir` (created if needed).
pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    store: &ParamStore<S>,
    cfg: &RunConfig,
    completed: &[Stage],
    lineage: &str,
) -> Result<CheckpointMeta, CheckpointError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let store_path = dir.join(STORE_FILE);
    store.save(&store_path).map_err(|e| io_err(&store_path, e))?;
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        stage: completed
            .last()
            .map(|s| s.name().to_string())
            .unwrap_or_else(|| "init".into()),
        completed_stages: completed.iter().map(|s| s.name().to_string()).collect(),
        params_sha256: store.checksum(),
        config_sha256: config_digest(cfg),
        lineage: lineage.to_string(),
    };
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("manifest serializes");
    std::fs::write(&meta_path, text).map_err(|e| io_err(&meta_path, e))?;
    Ok(meta)
}

/// Read a checkpoint back, verifying the parameter digest and that the
/// caller's configuration matches the one the checkpoint was written under.
pub fn load_checkpoint_store<S: Scalar>(
    dir: &Path,
    cfg: &RunConfig,
) -> Result<(ParamStore<S>, CheckpointMeta), CheckpointError> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| CheckpointError::Meta {
        path: meta_path.display().to_string(),
        msg: e.to_string(),
    })?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(meta.version));
    }
    let this_cfg = config_digest(cfg);
    if meta.config_sha256 != this_cfg {
        return Err(CheckpointError::ConfigMismatch {
            expected: meta.config_sha256,
            actual: this_cfg,
        });
    }
    let store_path = dir.join(STORE_FILE);
    let store = ParamStore::<S>::load(&store_path).map_err(|e| io_err(&store_path, e))?;
    let actual = store.checksum();
    if actual != meta.params_sha256 {
        return Err(CheckpointError::DigestMismatch {
            expected: meta.params_sha256,
            actual,
        });
    }
    Ok((store, meta))
}
