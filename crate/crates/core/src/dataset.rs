//! Stage one and its product: train the age modulator against the world's
//! frozen critics, then mass-produce a multiview aging dataset with it.
//!
//! A dataset is a directory of 8-bit RGB PNGs plus a `manifest.jsonl` whose
//! first line is a header, followed by one line per identity and one line per
//! record. Every image is checksummed; loading verifies the checksums and
//! names the offending record on mismatch. Generation is deterministic: the
//! same configuration writes byte-identical files.

use std::io::{BufRead, Write};
use std::path::Path;

use ageview_autograd::store::{seeded, uniform_f64, ParamStore, SeedRng};
use ageview_autograd::{Adam, AdamConfig, Graph, Scalar};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::losses::{
    age_loss, directional_clip_loss, identity_loss, l2_loss, norm_loss, perceptual_loss,
    total_loss, LossReport, LossTerms, LossWeights,
};
use crate::modulation::AgeModulator;
use crate::nn::Binding;
use crate::viewpoint::sample_training_pose;
use crate::world::{age_prompt, Pose, World, WorldError};

/// Abort threshold for the stage-one total loss.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Age gap bounds (years) for sampled aging targets.
pub const AGE_GAP_MIN: f64 = 10.0;
pub const AGE_GAP_MAX: f64 = 40.0;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite total loss at step {step}")]
    NonFinite { step: usize },
    #[error("total loss {value:.3e} at step {step} exceeds the divergence limit {limit:.1e}")]
    Diverged { step: usize, value: f64, limit: f64 },
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Stage-one optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config { steps: 300, lr: 1e-2, seed: 7 }
    }
}

/// Reshape a flat embedding to the `[1, E]` row the modulator expects.
pub fn embed_row<S: Scalar>(e: ArrayD<S>) -> ArrayD<S> {
    let n = e.len();
    e.into_shape_with_order(IxDyn(&[1, n])).expect("contiguous embedding")
}

/// Sample a target age a sensible gap away from the source age: the gap is
/// uniform in `[AGE_GAP_MIN, AGE_GAP_MAX]`, the direction random where both
/// fit, and the result clamps to `[0, 100]` and rounds to whole years.
pub fn sample_target_age(rng: &mut SeedRng, source_age: f64) -> i64 {
    let gap = uniform_f64(rng, AGE_GAP_MIN, AGE_GAP_MAX).round();
    let src = source_age.round();
    let up = if src < AGE_GAP_MIN {
        true
    } else if src > 100.0 - AGE_GAP_MIN {
        false
    } else {
        uniform_f64(rng, 0.0, 1.0) < 0.5
    };
    let target = if up { src + gap } else { src - gap };
    target.clamp(0.0, 100.0) as i64
}

/// Train the modulator's parameters (`agemod.`) against the world's frozen
/// critics with the six-term objective. Returns per-step loss reports; aborts
/// on non-finite or runaway totals.
pub fn train_stage1<S: Scalar>(
    store: &mut ParamStore<S>,
    modulator: &AgeModulator,
    world: &World<S>,
    cfg: &Stage1Config,
) -> Result<Vec<LossReport>, TrainError> {
    let weights = LossWeights::default();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = seeded(cfg.seed);
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let identity_seed: u64 = rand::Rng::gen(&mut rng);
        let code = world.sample_latent(identity_seed);
        let source_age = world.generator.age_of(&code.styles);
        let target_age = sample_target_age(&mut rng, source_age);
        let pose = sample_training_pose(&mut rng);

        let e_src = embed_row(world.clip.embed_text(&age_prompt(source_age.round() as i64))?);
        let e_tgt = embed_row(world.clip.embed_text(&age_prompt(target_age))?);

        let mut g = Graph::new();
        let mut b = Binding::new();
        let w = g.leaf(code.styles.clone());
        let e = g.leaf(e_tgt.clone());
        let residual = modulator.residual(&mut g, &mut b, store, w, e);
        let w_aged = g.add(w, residual);

        let x_src = world.generator.render(&mut g, w, pose)?;
        let x_aged = world.generator.render(&mut g, w_aged, pose)?;

        let predicted = world.age.predict_age(&mut g, x_aged);
        let target_node =
            g.leaf(ArrayD::from_elem(IxDyn(&[1]), S::from_f64(target_age as f64)));
        let term_age = age_loss(&mut g, predicted, target_node);

        let img_src = world.clip.embed_image(&mut g, x_src);
        let img_aged = world.clip.embed_image(&mut g, x_aged);
        let d_img = g.sub(img_aged, img_src);
        let te_src = g.leaf(e_src);
        let te_tgt = g.leaf(e_tgt);
        let d_txt = g.sub(te_tgt, te_src);
        let (term_clip, clip_degenerate) = directional_clip_loss(&mut g, d_img, d_txt);

        let id_src = world.identity.embed_identity(&mut g, x_src);
        let id_aged = world.identity.embed_identity(&mut g, x_aged);
        let (term_id, _) = identity_loss(&mut g, id_src, id_aged);

        let f_src = world.perceptual.features(&mut g, x_src);
        let f_aged = world.perceptual.features(&mut g, x_aged);
        let term_perc = perceptual_loss(&mut g, f_src, f_aged);

        let term_l2 = l2_loss(&mut g, x_aged, x_src);
        let term_norm = norm_loss(&mut g, residual);

        let terms = LossTerms {
            age: term_age,
            clip: term_clip,
            id: term_id,
            perceptual: term_perc,
            l2: term_l2,
            norm: term_norm,
        };
        let total = total_loss(&mut g, &weights, &terms);
        let report = LossReport::from_graph(&g, &terms, total, clip_degenerate);
        if !report.total.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        if report.total > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged {
                step,
                value: report.total,
                limit: DIVERGENCE_LIMIT,
            });
        }
        let grads = g.backward(total);
        let gm = b.grads(&grads, |n| n.starts_with("agemod."));
        adam.step(store, &gm);
        reports.push(report);
    }
    Ok(reports)
}

/// Mean absolute age error of the modulator over a fixed probe set: fresh
/// identities, targets 25 years up and down (clamped), frontal renders.
/// Deterministic for a given seed; an untrained modulator scores the raw gap.
pub fn eval_age_error<S: Scalar>(
    store: &ParamStore<S>,
    modulator: &AgeModulator,
    world: &World<S>,
    n_probes: usize,
    seed: u64,
) -> f64 {
    let mut rng = seeded(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..n_probes {
        let identity_seed: u64 = rand::Rng::gen(&mut rng);
        let code = world.sample_latent(identity_seed);
        let src = world.generator.age_of(&code.styles);
        for dir in [-1.0, 1.0] {
            let target = (src + dir * 25.0).clamp(0.0, 100.0).round();
            let e = embed_row(
                world
                    .clip
                    .embed_text(&age_prompt(target as i64))
                    .expect("age prompt is non-empty"),
            );
            let mut g = Graph::inference();
            let mut b = Binding::new();
            let wv = g.leaf(code.styles.clone());
            let ev = g.leaf(e);
            let aged = modulator.apply(&mut g, &mut b, store, wv, ev);
            let img = world
                .generator
                .render(&mut g, aged, Pose::frontal())
                .expect("frontal pose is valid");
            let read = world.age.predict_age(&mut g, img);
            total += (g.scalar_val(read).as_f64() - target).abs();
            count += 1;
        }
    }
    total / count as f64
}

// ---------------------------------------------------------------------------
// Image files
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("record {index} ({file}): checksum mismatch")]
    Checksum { index: usize, file: String },
    #[error("image {file}: {msg}")]
    Image { file: String, msg: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    World(#[from] WorldError),
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), source }
}

/// Quantize a signal value in [-1, 1] to one 8-bit channel.
pub fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Invert [`quantize`] up to the quantization step.
pub fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Encode a `[3, h, w]` image in [-1, 1] as PNG bytes (deterministic).
pub fn image_to_png_bytes<S: Scalar>(img: &ArrayD<S>) -> Vec<u8> {
    let sh = img.shape();
    assert_eq!(sh.len(), 3, "expected [3, h, w]");
    assert_eq!(sh[0], 3, "expected three channels");
    let (h, w) = (sh[1], sh[2]);
    let mut raw = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                raw.push(quantize(img[[c, y, x]].as_f64()));
            }
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    let mut out = std::io::Cursor::new(Vec::new());
    image::DynamicImage::ImageRgb8(rgb)
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory png encode");
    out.into_inner()
}

/// Decode PNG bytes back to a `[3, h, w]` image in [-1, 1].
pub fn png_bytes_to_image<S: Scalar>(bytes: &[u8], file: &str) -> Result<ArrayD<S>, DatasetError> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| DatasetError::Image { file: file.into(), msg: e.to_string() })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = ArrayD::<S>::zeros(IxDyn(&[3, h, w]));
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                img[[c, y, x]] = S::from_f64(dequantize(px.0[c]));
            }
        }
    }
    Ok(img)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Manifest schema
// ---------------------------------------------------------------------------

/// Generation settings; serialized into the manifest header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// World seed used for the generator and critics.
    pub world_seed: u64,
    /// Number of identities N.
    pub n_identities: usize,
    /// Views per identity V.
    pub views_per_identity: usize,
    /// Aging targets per identity; the triplet {younger, source, older}.
    pub ages_per_identity: usize,
    /// Seed for identity latents, age gaps, and view poses.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            world_seed: 1000,
            n_identities: 64,
            views_per_identity: 8,
            ages_per_identity: 3,
            seed: 1234,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_identities == 0 {
            return Err(DatasetError::Config("n_identities must be positive".into()));
        }
        if self.views_per_identity == 0 {
            return Err(DatasetError::Config("views_per_identity must be positive".into()));
        }
        if self.ages_per_identity != 3 {
            return Err(DatasetError::Config(format!(
                "ages_per_identity must be 3 (younger, source, older), got {}",
                self.ages_per_identity
            )));
        }
        Ok(())
    }

    pub fn n_records(&self) -> usize {
        self.n_identities * self.views_per_identity * self.ages_per_identity
    }

    /// Identities reserved for validation: the last ⌈N/8⌉.
    pub fn n_val_identities(&self) -> usize {
        self.n_identities.div_ceil(8)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub config: DatasetConfig,
    pub image_size: usize,
    pub n_records: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IdentityEntry {
    pub index: usize,
    /// Seed fed to the generator's latent sampler.
    pub latent_seed: u64,
    /// The generator's own age reading of the unedited latent, whole years.
    pub source_age: i64,
    /// Sampled aging gap (years).
    pub age_gap: i64,
    /// Target ages in record order: younger, source, older.
    pub target_ages: [i64; 3],
    /// Frontal unedited render.
    pub source_file: String,
    pub source_sha256: String,
    /// True for validation identities.
    pub val: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub identity: usize,
    /// 0 = younger, 1 = source age, 2 = older.
    pub age_index: usize,
    pub view_index: usize,
    pub target_age: i64,
    pub azimuth: f64,
    pub polar: f64,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifestLine {
    Header(DatasetHeader),
    Identity(IdentityEntry),
    Record(RecordEntry),
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn identity_rng(cfg_seed: u64, identity: usize) -> SeedRng {
    seeded(cfg_seed.wrapping_add((identity as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Render the full dataset into `out_dir` with a trained modulator.
///
/// Per identity: one latent, one age gap, `V` poses shared across the age
/// triplet, a frontal source render, and `V × 3` aged renders. All randomness
/// is drawn from a per-identity stream, so output bytes depend only on the
/// configuration and the store contents.
pub fn generate_dataset<S: Scalar>(
    world: &World<S>,
    modulator: &AgeModulator,
    store: &ParamStore<S>,
    cfg: &DatasetConfig,
    out_dir: &Path,
) -> Result<DatasetHeader, DatasetError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let header = DatasetHeader {
        version: 1,
        config: cfg.clone(),
        image_size: world.image_size,
        n_records: cfg.n_records(),
    };
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = std::io::BufWriter::new(
        std::fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?,
    );
    let mut write_line = |line: &ManifestLine| -> Result<(), DatasetError> {
        let s = serde_json::to_string(line)
            .map_err(|e| DatasetError::Manifest { line: 0, msg: e.to_string() })?;
        writeln!(manifest, "{s}").map_err(|e| io_err(&manifest_path, e))
    };
    write_line(&ManifestLine::Header(header.clone()))?;

    let n_val = cfg.n_val_identities();
    let mut identities = Vec::with_capacity(cfg.n_identities);
    let mut records = Vec::with_capacity(cfg.n_records());
    for i in 0..cfg.n_identities {
        let mut rng = identity_rng(cfg.seed, i);
        let latent_seed: u64 = rand::Rng::gen(&mut rng);
        let code = world.sample_latent(latent_seed);
        let source_age = world.generator.age_of(&code.styles).round();
        let age_gap = uniform_f64(&mut rng, AGE_GAP_MIN, AGE_GAP_MAX).round();
        let target_ages = [
            (source_age - age_gap).clamp(0.0, 100.0) as i64,
            source_age as i64,
            (source_age + age_gap).clamp(0.0, 100.0) as i64,
        ];
        let poses: Vec<Pose> =
            (0..cfg.views_per_identity).map(|_| sample_training_pose(&mut rng)).collect();

        let source_img = world.render_array(&code.styles, Pose::frontal())?;
        let source_file = format!("id{i:04}_source.png");
        let source_png = image_to_png_bytes(&source_img);
        let source_sha256 = sha256_hex(&source_png);
        let path = out_dir.join(&source_file);
        std::fs::write(&path, &source_png).map_err(|e| io_err(&path, e))?;
        identities.push(IdentityEntry {
            index: i,
            latent_seed,
            source_age: source_age as i64,
            age_gap: age_gap as i64,
            target_ages,
            source_file,
            source_sha256,
            val: i >= cfg.n_identities - n_val,
        });

        for (age_index, &target_age) in target_ages.iter().enumerate() {
            let e = embed_row(world.clip.embed_text(&age_prompt(target_age))?);
            let mut g = Graph::inference();
            let mut b = Binding::new();
            let wv = g.leaf(code.styles.clone());
            let ev = g.leaf(e);
            let aged = modulator.apply(&mut g, &mut b, store, wv, ev);
            let aged_styles = g.val(aged).clone();
            for (view_index, pose) in poses.iter().enumerate() {
                let img = world.render_array(&aged_styles, *pose)?;
                let file = format!("id{i:04}_age{age_index}_view{view_index:02}.png");
                let png = image_to_png_bytes(&img);
                let sha256 = sha256_hex(&png);
                let path = out_dir.join(&file);
                std::fs::write(&path, &png).map_err(|e| io_err(&path, e))?;
                records.push(RecordEntry {
                    identity: i,
                    age_index,
                    view_index,
                    target_age,
                    azimuth: pose.azimuth,
                    polar: pose.polar,
                    file,
                    sha256,
                });
            }
        }
    }
    for e in &identities {
        write_line(&ManifestLine::Identity(e.clone()))?;
    }
    for r in &records {
        write_line(&ManifestLine::Record(r.clone()))?;
    }
    manifest.flush().map_err(|e| io_err(&manifest_path, e))?;
    Ok(header)
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// A dataset pulled fully into memory, checksum-verified.
#[derive(Debug)]
pub struct Dataset<S: Scalar> {
    pub header: DatasetHeader,
    pub identities: Vec<IdentityEntry>,
    pub records: Vec<RecordEntry>,
    /// One image per record, `[3, s, s]` in [-1, 1].
    pub images: Vec<ArrayD<S>>,
    /// One frontal source image per identity.
    pub source_images: Vec<ArrayD<S>>,
}

/// The views of one (identity, age) cell, in view order — the frame stack
/// that temporal attention trains on.
#[derive(Debug, Clone)]
pub struct FrameGroup {
    pub identity: usize,
    pub age_index: usize,
    pub target_age: i64,
    /// Indices into `Dataset::records`.
    pub records: Vec<usize>,
}

impl<S: Scalar> Dataset<S> {
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let manifest_path = dir.join("manifest.jsonl");
        let file =
            std::fs::File::open(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let mut header: Option<DatasetHeader> = None;
        let mut identities = Vec::new();
        let mut records = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.map_err(|e| io_err(&manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(&line)
                .map_err(|e| DatasetError::Manifest { line: lineno, msg: e.to_string() })?;
            match parsed {
                ManifestLine::Header(h) => {
                    if lineno != 1 {
                        return Err(DatasetError::Manifest {
                            line: lineno,
                            msg: "header must be the first line".into(),
                        });
                    }
                    header = Some(h);
                }
                ManifestLine::Identity(e) => identities.push(e),
                ManifestLine::Record(r) => records.push(r),
            }
        }
        let header = header.ok_or(DatasetError::Manifest {
            line: 1,
            msg: "missing header line".into(),
        })?;
        if records.len() != header.n_records {
            return Err(DatasetError::Manifest {
                line: 1,
                msg: format!(
                    "header claims {} records, manifest lists {}",
                    header.n_records,
                    records.len()
                ),
            });
        }
        if identities.len() != header.config.n_identities {
            return Err(DatasetError::Manifest {
                line: 1,
                msg: format!(
                    "header claims {} identities, manifest lists {}",
                    header.config.n_identities,
                    identities.len()
                ),
            });
        }

        let read_image = |file: &str, sha: &str, index: usize| -> Result<ArrayD<S>, DatasetError> {
            let path = dir.join(file);
            let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
            if sha256_hex(&bytes) != sha {
                return Err(DatasetError::Checksum { index, file: file.into() });
            }
            let img = png_bytes_to_image::<S>(&bytes, file)?;
            let s = header.image_size;
            if img.shape() != [3, s, s] {
                return Err(DatasetError::Image {
                    file: file.into(),
                    msg: format!("expected [3, {s}, {s}], got {:?}", img.shape()),
                });
            }
            Ok(img)
        };
        let mut images = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            images.push(read_image(&r.file, &r.sha256, i)?);
        }
        let mut source_images = Vec::with_capacity(identities.len());
        for e in &identities {
            source_images.push(read_image(&e.source_file, &e.source_sha256, e.index)?);
        }
        Ok(Dataset { header, identities, records, images, source_images })
    }

    /// Frame stacks in manifest order.
    pub fn frame_groups(&self) -> Vec<FrameGroup> {
        let mut groups: IndexMap<(usize, usize), FrameGroup> = IndexMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups
                .entry((r.identity, r.age_index))
                .or_insert_with(|| FrameGroup {
                    identity: r.identity,
                    age_index: r.age_index,
                    target_age: r.target_age,
                    records: Vec::new(),
                })
                .records
                .push(i);
        }
        groups.into_values().collect()
    }

    /// Record indices of training identities (validation excluded).
    pub fn train_record_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| !self.identities[r.identity].val)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn val_record_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| self.identities[r.identity].val)
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulation::AgeModConfig;

    fn toy_world() -> World<f64> {
        World::<f64>::toy(501)
    }

    fn fresh_modulator(seed: u64) -> (AgeModulator, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let m = AgeModulator::init(AgeModConfig::default(), &mut store, &mut rng);
        (m, store)
    }

    #[test]
    fn png_roundtrip_hits_quantization_accuracy() {
        let world = toy_world();
        let code = world.sample_latent(3);
        let img = world.render_array(&code.styles, Pose::new(0.2, -0.1)).unwrap();
        let bytes = image_to_png_bytes(&img);
        let again = image_to_png_bytes(&img);
        assert_eq!(bytes, again, "png encoding must be deterministic");
        let back = png_bytes_to_image::<f64>(&bytes, "x.png").unwrap();
        assert_eq!(back.shape(), img.shape());
        let worst = (&back - &img).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(worst <= 0.5 / 127.5 + 1e-12, "quantization error {worst}");
        // Quantized values survive a second trip exactly.
        let twice = png_bytes_to_image::<f64>(&image_to_png_bytes(&back), "y.png").unwrap();
        assert_eq!(twice, back);
    }

    #[test]
    fn quantize_endpoints_are_exact() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-1.3), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(dequantize(0), -1.0);
        assert_eq!(dequantize(255), 1.0);
        assert_eq!(dequantize(quantize(0.0)).abs() < 1e-2, true);
    }

    #[test]
    fn target_age_sampler_respects_bounds() {
        let mut rng = seeded(8);
        for src in [0.0, 4.0, 37.0, 50.0, 96.0, 100.0] {
            for _ in 0..50 {
                let t = sample_target_age(&mut rng, src);
                assert!((0..=100).contains(&t), "target {t} for source {src}");
                let gap = (t as f64 - src.round()).abs();
                assert!(gap >= 1.0, "target {t} too close to source {src}");
                // Unclamped draws keep the documented gap range.
                if t > 0 && t < 100 {
                    assert!(
                        (AGE_GAP_MIN..=AGE_GAP_MAX).contains(&gap),
                        "gap {gap} for source {src}"
                    );
                }
            }
        }
    }

    #[test]
    fn stage1_training_reduces_the_age_error() {
        let world = toy_world();
        let (m, mut store) = fresh_modulator(41);
        let before = eval_age_error(&store, &m, &world, 6, 333);
        // An identity modulator scores the raw 25-year gap (clamping aside).
        assert!(before > 15.0, "untrained probe error should be large, got {before:.2}");
        let cfg = Stage1Config { steps: 150, lr: 1e-2, seed: 11 };
        let reports = train_stage1(&mut store, &m, &world, &cfg).expect("training runs");
        assert_eq!(reports.len(), 150);
        assert!(reports.iter().all(|r| r.total.is_finite()));
        let after = eval_age_error(&store, &m, &world, 6, 333);
        assert!(
            after < before * 0.6,
            "probe age error should drop by 40%: before {before:.2}, after {after:.2}"
        );
    }

    #[test]
    fn generation_is_deterministic_and_loads_back() {
        let world = toy_world();
        let (m, store) = fresh_modulator(42);
        let cfg = DatasetConfig {
            world_seed: 501,
            n_identities: 4,
            views_per_identity: 2,
            ages_per_identity: 3,
            seed: 99,
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let header = generate_dataset(&world, &m, &store, &cfg, dir_a.path()).unwrap();
        generate_dataset(&world, &m, &store, &cfg, dir_b.path()).unwrap();
        assert_eq!(header.n_records, 24);

        let manifest_a = std::fs::read(dir_a.path().join("manifest.jsonl")).unwrap();
        let manifest_b = std::fs::read(dir_b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest_a, manifest_b, "manifests must be byte-identical");

        let ds = Dataset::<f64>::load(dir_a.path()).unwrap();
        assert_eq!(ds.records.len(), 24);
        assert_eq!(ds.identities.len(), 4);
        assert_eq!(ds.images.len(), 24);
        for r in &ds.records {
            let other = std::fs::read(dir_b.path().join(&r.file)).unwrap();
            assert_eq!(sha256_hex(&other), r.sha256, "file {} differs across runs", r.file);
        }

        // Age triplet is ordered and centered on the source age.
        for e in &ds.identities {
            assert!(e.target_ages[0] <= e.target_ages[1] && e.target_ages[1] <= e.target_ages[2]);
            assert_eq!(e.target_ages[1], e.source_age);
            assert!((10..=40).contains(&e.age_gap));
        }
        // Validation split is the last ceil(4/8) = 1 identity.
        let val: Vec<usize> =
            ds.identities.iter().filter(|e| e.val).map(|e| e.index).collect();
        assert_eq!(val, vec![3]);
        assert_eq!(ds.val_record_indices().len(), 6);
        assert_eq!(ds.train_record_indices().len(), 18);

        // Poses are shared across the age triplet and stay inside the box.
        for r in &ds.records {
            assert!(r.azimuth.abs() <= crate::viewpoint::POSE_RANGE_AZ);
            assert!(r.polar.abs() <= crate::viewpoint::POSE_RANGE_PO);
        }
        for i in 0..4 {
            for v in 0..2 {
                let poses: Vec<(f64, f64)> = ds
                    .records
                    .iter()
                    .filter(|r| r.identity == i && r.view_index == v)
                    .map(|r| (r.azimuth, r.polar))
                    .collect();
                assert_eq!(poses.len(), 3);
                assert!(poses.windows(2).all(|p| p[0] == p[1]));
            }
        }

        // Frame groups: 4 identities × 3 ages, each with 2 views in order.
        let groups = ds.frame_groups();
        assert_eq!(groups.len(), 12);
        for gp in &groups {
            assert_eq!(gp.records.len(), 2);
            let views: Vec<usize> =
                gp.records.iter().map(|&i| ds.records[i].view_index).collect();
            assert_eq!(views, vec![0, 1]);
        }

        // The dataset's images actually read back as the advertised ages
        // at the source record (the modulator is untrained and unity here,
        // so the unedited latent reads back its own age).
        for e in &ds.identities {
            let src_rec = ds
                .records
                .iter()
                .zip(&ds.images)
                .find(|(r, _)| r.identity == e.index && r.age_index == 1 && r.view_index == 0)
                .unwrap();
            let read = world.predict_age_array(src_rec.1);
            assert!(
                (read - e.source_age as f64).abs() <= 1.0,
                "identity {}: read {read}, manifest {}",
                e.index,
                e.source_age
            );
        }
    }

    #[test]
    fn loader_names_the_broken_file() {
        let world = toy_world();
        let (m, store) = fresh_modulator(43);
        let cfg = DatasetConfig {
            world_seed: 501,
            n_identities: 2,
            views_per_identity: 1,
            ages_per_identity: 3,
            seed: 7,
        };
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&world, &m, &store, &cfg, dir.path()).unwrap();

        // Corrupt one image: checksum failure naming the record.
        let victim = "id0001_age2_view00.png";
        let path = dir.path().join(victim);
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 20;
        bytes[last] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = Dataset::<f64>::load(dir.path()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("checksum mismatch") && msg.contains(victim), "{msg}");

        // Remove it entirely: i/o error naming the path.
        std::fs::remove_file(&path).unwrap();
        let err = Dataset::<f64>::load(dir.path()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains(victim), "{msg}");

        // Break the manifest: error names the line.
        let manifest = dir.path().join("manifest.jsonl");
        let text = std::fs::read_to_string(&manifest).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{\"kind\":\"identity\",\"nonsense\":true}";
        std::fs::write(&manifest, lines.join("\n")).unwrap();
        let err = Dataset::<f64>::load(dir.path()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn config_validation_names_the_problem() {
        let bad = DatasetConfig { ages_per_identity: 4, ..DatasetConfig::default() };
        let msg = format!("{}", bad.validate().unwrap_err());
        assert!(msg.contains("ages_per_identity"), "{msg}");
        let bad = DatasetConfig { n_identities: 0, ..DatasetConfig::default() };
        let msg = format!("{}", bad.validate().unwrap_err());
        assert!(msg.contains("n_identities"), "{msg}");
    }
}
