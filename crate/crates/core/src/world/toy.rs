//! The deterministic synthetic world.
//!
//! A rendered sprite is a 64x64 image in [-1, 1] partitioned into fixed
//! regions (all constants scale with image size; B = size/16 is also the
//! codec block):
//!
//! ```text
//! +--------+------------------------+--------+
//! | age    |   background (-1)      | polar  |
//! | patch  +------------------------+ strip  |
//! +--------+                        | (bump  |
//! | id     |      face canvas       |  at    |
//! | bar-   |  (blobs from w, pose-  |  v(θ)) |
//! | code   |   translated)          |        |
//! |        |                        |        |
//! +--------+------------------------+--------+
//! |  azimuth strip (bump at u(ϕ))            |
//! +-------------------------------------------+
//! ```
//!
//! - Age patch (2Bx2B corner): constant value 2*age/100 - 1 where the age
//!   scalar is a fixed projection of w. The age predictor reads the patch
//!   mean; the round trip is exact and linear, so it is differentiable and
//!   survives the block-mean-preserving codec.
//! - Identity barcode: 12 horizontal bands, each a fixed tanh projection of
//!   w. Bands never move with pose, so identity is pose-invariant by
//!   construction, and each band is block-aligned so it survives the codec.
//!
//! Latent geometry: the age scalar reads the uniform (row-constant)
//! direction of w, while the barcode and blob readouts are row-centered and
//! hence exactly blind to it. Adding a per-row constant to w therefore ages
//! a face without touching its identity content — precisely the family of
//! shifts a residual modulator's β path produces — and, conversely, no
//! centered edit can fake an age.
//! - Pose strips: a Gaussian bump whose center is linear in the angle; the
//!   estimator inverts it with an intensity-weighted centroid.
//! - Face canvas: soft Gaussian blobs (head, eyes, mouth, hair) with colors
//!   from fixed projections of w, translated by the documented
//!   pixels-per-radian constants.
//!
//! Every component draws its fixed projections from one seed, in f64, so
//! the whole world is bit-reproducible.

use super::{
    AgePredictor, FaceGenerator, IdentityEmbedder, LatentCode, LatentCodec, PerceptualMetric,
    Pose, PoseEstimator, TextImageEmbedder, WorldError,
};
use ageview_autograd::store::{normal_array, seeded};
use ageview_autograd::{Graph, Scalar, Var};
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ToyWorldConfig {
    pub seed: u64,
    /// Square image side; must be divisible by 16 and have a power-of-two
    /// block (size/16).
    pub image_size: usize,
    /// Style rows L.
    pub latent_rows: usize,
    /// Style columns D (also the z dimension).
    pub latent_cols: usize,
    /// Text/image embedding dimension.
    pub embed_dim: usize,
    /// Perceptual feature dimension.
    pub feat_dim: usize,
}

impl ToyWorldConfig {
    pub fn new(seed: u64) -> Self {
        ToyWorldConfig { seed, ..Default::default() }
    }
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        ToyWorldConfig {
            seed: 0,
            image_size: 64,
            latent_rows: 14,
            latent_cols: 512,
            embed_dim: 16,
            feat_dim: 32,
        }
    }
}

const ID_BANDS: usize = 12;
/// Age scalar: 50 + AGE_STD * (projection of w onto the uniform unit
/// direction). A freshly mapped latent's projection has standard deviation
/// ~sqrt(L), so source ages concentrate near 50 (± a few years) while
/// modulation along the same direction reaches the whole [0, 100] range.
const AGE_STD: f64 = 0.75;
/// Pose-strip bump: background -1, amplitude above background. Kept wide and
/// low so the block codec round-trips strips well above the PSNR floor.
const BUMP_AMP: f64 = 1.0;
/// Centroid weight threshold above background; clips the bump tails so the
/// support is compact (exact symmetric centroid) and so small background
/// errors in generated images carry no weight.
const BUMP_WEIGHT_FLOOR: f64 = 0.4;
/// Face-blob translation, pixels per radian, in blocks (1.25 * B px/rad).
const AZ_FACE_BLOCKS_PER_RAD: f64 = 1.25;
const PO_FACE_BLOCKS_PER_RAD: f64 = 2.0;

pub struct ToyWorld<S: Scalar> {
    pub cfg: ToyWorldConfig,
    // generator map: row = z * a_map + b_map, broadcast to L rows
    a_map: ArrayD<S>,
    b_map: ArrayD<S>,
    // fixed projections of vec(w)
    p_age: ArrayD<S>,   // [LD, 1], unit norm
    p_bands: ArrayD<S>, // [LD, ID_BANDS]
    p_blobs: ArrayD<S>, // [LD, 3 * n_blobs]
    // embedding constants
    age_dir: ArrayD<S>, // [E], unit norm
    p_img: ArrayD<S>,   // [3*(12B)^2, E]
    p_feat: ArrayD<S>,  // [3*size^2, feat_dim]
    // codec channel mixing, orthonormal columns
    m_mix: ArrayD<S>,  // [4, 3]
    m_unmix: ArrayD<S>, // [3, 4] = m_mixᵀ
}

/// Blob shape table: (center_y, center_x, sigma_y, sigma_x, amplitude),
/// all in blocks, canvas coordinates (12B x 12B, center 6B).
const BLOBS: &[(f64, f64, f64, f64, f64)] = &[
    (6.0, 6.0, 2.5, 2.5, 0.50),    // head
    (4.75, 4.25, 1.5, 1.5, 0.45),  // left eye
    (4.75, 7.75, 1.5, 1.5, 0.45),  // right eye
    (8.5, 6.0, 1.25, 1.75, 0.40),  // mouth
    (2.5, 6.0, 1.25, 3.0, 0.50),   // hair
];

impl<S: Scalar> ToyWorld<S> {
    pub fn new(cfg: ToyWorldConfig) -> Self {
        assert!(cfg.image_size % 16 == 0, "image size must be divisible by 16");
        let block = cfg.image_size / 16;
        assert!(block.is_power_of_two(), "codec block must be a power of two");
        assert!(cfg.latent_rows >= 1 && cfg.latent_cols >= 2);
        let ld = cfg.latent_rows * cfg.latent_cols;
        let d = cfg.latent_cols;
        let face = 12 * block;

        let a_map =
            normal_array::<S>(&mut seeded(cfg.seed ^ 0x11), &[d, d], 0.0, 1.0 / (d as f64).sqrt());
        let b_map = normal_array::<S>(&mut seeded(cfg.seed ^ 0x12), &[1, d], 0.0, 0.3);

        // Age reads the uniform direction; identity readouts are
        // row-centered, making them exactly orthogonal to it (see module
        // docs).
        let p_age = ArrayD::from_elem(IxDyn(&[ld, 1]), S::from_f64(1.0 / (ld as f64).sqrt()));
        let p_bands = centered_unit_columns::<S>(cfg.seed ^ 0x22, cfg.latent_rows, d, ID_BANDS);
        let p_blobs =
            centered_unit_columns::<S>(cfg.seed ^ 0x23, cfg.latent_rows, d, 3 * (BLOBS.len() + 1));

        let age_dir = {
            let v = unit_columns::<S>(cfg.seed ^ 0x31, cfg.embed_dim, 1);
            v.into_shape_with_order(IxDyn(&[cfg.embed_dim])).unwrap()
        };
        let n_img = 3 * face * face;
        let p_img = normal_array::<S>(
            &mut seeded(cfg.seed ^ 0x32),
            &[n_img, cfg.embed_dim],
            0.0,
            1.0 / (n_img as f64).sqrt(),
        );
        let n_feat = 3 * cfg.image_size * cfg.image_size;
        let p_feat = normal_array::<S>(
            &mut seeded(cfg.seed ^ 0x33),
            &[n_feat, cfg.feat_dim],
            0.0,
            1.0 / (n_feat as f64).sqrt(),
        );

        let (m_mix, m_unmix) = orthonormal_mix::<S>(cfg.seed ^ 0x41);

        ToyWorld {
            cfg,
            a_map,
            b_map,
            p_age,
            p_bands,
            p_blobs,
            age_dir,
            p_img,
            p_feat,
            m_mix,
            m_unmix,
        }
    }

    fn block(&self) -> usize {
        self.cfg.image_size / 16
    }

    /// Azimuth-strip mapping: bump center u = 8B + scale * azimuth.
    pub fn az_strip_px_per_rad(&self) -> f64 {
        7.0 * self.block() as f64 / std::f64::consts::PI
    }

    /// Polar-strip mapping: bump center v = 7B + scale * polar.
    pub fn po_strip_px_per_rad(&self) -> f64 {
        12.0 * self.block() as f64 / std::f64::consts::PI
    }

    fn bump_sigma(&self) -> f64 {
        2.0 * self.block() as f64
    }

    /// In-graph age scalar of a `[L, D]` latent node, years.
    fn age_node(&self, g: &mut Graph<S>, w: Var) -> Var {
        let ld = self.cfg.latent_rows * self.cfg.latent_cols;
        let vecw = g.reshape(w, &[1, ld]);
        let p = g.leaf(self.p_age.clone());
        let z = g.matmul(vecw, p);
        let scaled = g.scale(z, AGE_STD);
        let shifted = g.add_scalar(scaled, 50.0);
        let clamped = g.clamp(shifted, 0.0, 100.0);
        g.reshape(clamped, &[1])
    }

    /// Shift a latent along the age direction so its age scalar becomes
    /// `target` (exact unless clamped). Test and evaluation helper.
    pub fn latent_with_age(&self, w: &ArrayD<S>, target: f64) -> ArrayD<S> {
        let current = self.age_of_arr(w);
        let t = S::from_f64((target - current) / AGE_STD);
        let ld = self.cfg.latent_rows * self.cfg.latent_cols;
        let p = self
            .p_age
            .clone()
            .into_shape_with_order(IxDyn(&[ld]))
            .unwrap()
            .into_shape_with_order(IxDyn(&[self.cfg.latent_rows, self.cfg.latent_cols]))
            .unwrap();
        w + &p.mapv(|v| v * t)
    }

    fn age_of_arr(&self, w: &ArrayD<S>) -> f64 {
        let z: f64 = w
            .iter()
            .zip(self.p_age.iter())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        (50.0 + AGE_STD * z).clamp(0.0, 100.0)
    }

    /// Pose-strip content as a plain array: `[3, rows, cols]`, background -1
    /// with a Gaussian bump along `axis_len` at `center`.
    fn strip(&self, rows: usize, cols: usize, along_cols: bool, center: f64) -> ArrayD<S> {
        let sigma = self.bump_sigma();
        let n = if along_cols { cols } else { rows };
        let profile: Vec<f64> = (0..n)
            .map(|i| {
                let d = i as f64 - center;
                -1.0 + BUMP_AMP * (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let mut out = ArrayD::<S>::zeros(IxDyn(&[3, rows, cols]));
        for c in 0..3 {
            for y in 0..rows {
                for x in 0..cols {
                    let v = if along_cols { profile[x] } else { profile[y] };
                    out[[c, y, x]] = S::from_f64(v);
                }
            }
        }
        out
    }

    /// Pose-translated blob masks, `[n_blobs, 12B, 12B]` as one array plus a
    /// flat skin mask folded in as the final "blob".
    fn blob_masks(&self, pose: Pose) -> ArrayD<S> {
        let b = self.block() as f64;
        let face = 12 * self.block();
        let dx = AZ_FACE_BLOCKS_PER_RAD * b * pose.azimuth;
        let dy = PO_FACE_BLOCKS_PER_RAD * b * pose.polar;
        let n = BLOBS.len() + 1;
        let mut out = ArrayD::<S>::zeros(IxDyn(&[n, face, face]));
        for (j, &(cy, cx, sy, sx, amp)) in BLOBS.iter().enumerate() {
            let (cy, cx) = (cy * b + dy, cx * b + dx);
            let (sy, sx) = (sy * b, sx * b);
            for y in 0..face {
                for x in 0..face {
                    let ddy = y as f64 - cy;
                    let ddx = x as f64 - cx;
                    let v = amp * (-(ddy * ddy) / (2.0 * sy * sy) - (ddx * ddx) / (2.0 * sx * sx)).exp();
                    out[[j, y, x]] = S::from_f64(v);
                }
            }
        }
        // skin: flat over the whole canvas
        for y in 0..face {
            for x in 0..face {
                out[[BLOBS.len(), y, x]] = S::from_f64(0.35);
            }
        }
        out
    }
}

fn unit_columns<S: Scalar>(seed: u64, rows: usize, cols: usize) -> ArrayD<S> {
    let mut rng = seeded(seed);
    let mut a = normal_array::<f64>(&mut rng, &[rows, cols], 0.0, 1.0);
    for c in 0..cols {
        let norm: f64 = (0..rows).map(|r| a[[r, c]] * a[[r, c]]).sum::<f64>().sqrt();
        for r in 0..rows {
            a[[r, c]] /= norm;
        }
    }
    a.mapv(|v| S::from_f64(v))
}

/// Random unit columns over a flattened `[L, D]` latent, with each column's
/// per-row mean removed before normalization. Such readouts are blind to
/// per-row constant shifts — the subspace the age scalar lives in.
fn centered_unit_columns<S: Scalar>(seed: u64, l: usize, d: usize, cols: usize) -> ArrayD<S> {
    let mut rng = seeded(seed);
    let mut a = normal_array::<f64>(&mut rng, &[l * d, cols], 0.0, 1.0);
    for c in 0..cols {
        for r in 0..l {
            let mean: f64 = (0..d).map(|j| a[[r * d + j, c]]).sum::<f64>() / d as f64;
            for j in 0..d {
                a[[r * d + j, c]] -= mean;
            }
        }
        let norm: f64 = (0..l * d).map(|i| a[[i, c]] * a[[i, c]]).sum::<f64>().sqrt();
        for i in 0..l * d {
            a[[i, c]] /= norm;
        }
    }
    a.mapv(|v| S::from_f64(v))
}

/// Random [4,3] matrix with orthonormal columns (Gram-Schmidt in f64) and
/// its transpose, so unmix ∘ mix is the exact identity on 3 channels.
fn orthonormal_mix<S: Scalar>(seed: u64) -> (ArrayD<S>, ArrayD<S>) {
    let mut rng = seeded(seed);
    let a = normal_array::<f64>(&mut rng, &[4, 3], 0.0, 1.0);
    let mut cols: Vec<Vec<f64>> = (0..3).map(|c| (0..4).map(|r| a[[r, c]]).collect()).collect();
    for c in 0..3 {
        for prev in 0..c {
            let dot: f64 = (0..4).map(|r| cols[c][r] * cols[prev][r]).sum();
            for r in 0..4 {
                cols[c][r] -= dot * cols[prev][r];
            }
        }
        let norm: f64 = cols[c].iter().map(|v| v * v).sum::<f64>().sqrt();
        for r in 0..4 {
            cols[c][r] /= norm;
        }
    }
    let mut m = ArrayD::<S>::zeros(IxDyn(&[4, 3]));
    let mut mt = ArrayD::<S>::zeros(IxDyn(&[3, 4]));
    for r in 0..4 {
        for c in 0..3 {
            m[[r, c]] = S::from_f64(cols[c][r]);
            mt[[c, r]] = S::from_f64(cols[c][r]);
        }
    }
    (m, mt)
}

impl<S: Scalar> FaceGenerator<S> for ToyWorld<S> {
    fn latent_shape(&self) -> (usize, usize) {
        (self.cfg.latent_rows, self.cfg.latent_cols)
    }

    fn sample_z(&self, seed: u64) -> ArrayD<S> {
        let mut rng = seeded(self.cfg.seed ^ 0x51 ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        normal_array(&mut rng, &[1, self.cfg.latent_cols], 0.0, 1.0)
    }

    fn map_to_w(&self, z: &ArrayD<S>) -> Result<LatentCode<S>, WorldError> {
        if z.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(WorldError::NonFiniteLatent);
        }
        let z2 = z
            .clone()
            .into_shape_with_order(IxDyn(&[1, self.cfg.latent_cols]))
            .map_err(|_| WorldError::NonFiniteLatent)?;
        let z2 = z2.into_dimensionality::<ndarray::Ix2>().unwrap();
        let a2 = self.a_map.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let row = z2.dot(&a2).into_dyn() + &self.b_map;
        let mut styles = ArrayD::<S>::zeros(IxDyn(&[self.cfg.latent_rows, self.cfg.latent_cols]));
        for r in 0..self.cfg.latent_rows {
            styles
                .index_axis_mut(ndarray::Axis(0), r)
                .assign(&row.index_axis(ndarray::Axis(0), 0));
        }
        Ok(LatentCode { styles, seed_id: -1 })
    }

    fn render(&self, g: &mut Graph<S>, w: Var, pose: Pose) -> Result<Var, WorldError> {
        if !pose.is_valid() {
            return Err(WorldError::PoseOutOfRange { azimuth: pose.azimuth, polar: pose.polar });
        }
        let bk = self.block();
        let u = self.cfg.image_size;
        let full = [3usize, u, u];
        let (l, d) = (self.cfg.latent_rows, self.cfg.latent_cols);
        let ld = l * d;
        assert_eq!(g.val(w).shape(), &[l, d], "render expects a [L, D] latent");
        let vecw = g.reshape(w, &[1, ld]);

        // age patch
        let age = self.age_node(g, w); // [1]
        let patch_val = g.scale(age, 1.0 / 50.0);
        let patch_val = g.add_scalar(patch_val, -1.0);
        let pv = g.reshape(patch_val, &[1, 1, 1]);
        let ones_patch = g.leaf(ArrayD::from_elem(IxDyn(&[3, 2 * bk, 2 * bk]), S::one()));
        let patch = g.mul(pv, ones_patch);
        let patch = g.place(patch, &full, &[0, 0, 0]);

        // identity barcode: 12 bands of height B over rows 2B..14B, cols 0..2B
        let pb = g.leaf(self.p_bands.clone());
        let bands = g.matmul(vecw, pb); // [1, 12]
        let bands = g.scale(bands, 0.8);
        let bands = g.tanh(bands);
        let bands = g.scale(bands, 0.9);
        let bands = g.reshape(bands, &[ID_BANDS, 1, 1]);
        let ones_band = g.leaf(ArrayD::from_elem(IxDyn(&[1, bk, 2 * bk]), S::one()));
        let bc = g.mul(bands, ones_band); // [12, B, 2B]
        let bc = g.reshape(bc, &[1, ID_BANDS * bk, 2 * bk]);
        let ones_ch = g.leaf(ArrayD::from_elem(IxDyn(&[3, 1, 1]), S::one()));
        let bc = g.mul(bc, ones_ch); // [3, 12B, 2B]
        let barcode = g.place(bc, &full, &[0, 2 * bk, 0]);

        // face canvas: amplitudes from w times pose-translated masks
        let masks = self.blob_masks(pose); // [n, 12B, 12B]
        let n_blobs = masks.shape()[0];
        let face_px = 12 * bk;
        let pj = g.leaf(self.p_blobs.clone());
        let amps = g.matmul(vecw, pj); // [1, 3n]
        let amps = g.scale(amps, 0.7);
        let amps = g.tanh(amps);
        let mut face_sum: Option<Var> = None;
        for j in 0..n_blobs {
            let aj = g.slice_axis(amps, 1, 3 * j, 3 * j + 3); // [1, 3]
            let aj = g.reshape(aj, &[3, 1, 1]);
            let mask = masks.index_axis(ndarray::Axis(0), j).to_owned().into_dyn();
            let mask = mask.into_shape_with_order(IxDyn(&[1, face_px, face_px])).unwrap();
            let mv = g.leaf(mask);
            let contrib = g.mul(aj, mv); // [3, 12B, 12B]
            face_sum = Some(match face_sum {
                Some(acc) => g.add(acc, contrib),
                None => contrib,
            });
        }
        let face = g.tanh(face_sum.unwrap());
        let face = g.scale(face, 0.95);
        let face = g.place(face, &full, &[0, 2 * bk, 2 * bk]);

        // background band between patch and polar strip
        let bg = g.leaf(ArrayD::from_elem(IxDyn(&[3, 2 * bk, 12 * bk]), S::from_f64(-1.0)));
        let bg = g.place(bg, &full, &[0, 0, 2 * bk]);

        // pose strips (independent of w; plain leaves)
        let az_center = 8.0 * bk as f64 + self.az_strip_px_per_rad() * pose.azimuth;
        let bottom = self.strip(2 * bk, u, true, az_center);
        let bottom = g.leaf(bottom);
        let bottom = g.place(bottom, &full, &[0, 14 * bk, 0]);
        let po_center = 7.0 * bk as f64 + self.po_strip_px_per_rad() * pose.polar;
        let right = self.strip(14 * bk, 2 * bk, false, po_center);
        let right = g.leaf(right);
        let right = g.place(right, &full, &[0, 0, 14 * bk]);

        let mut img = g.add(patch, barcode);
        img = g.add(img, face);
        img = g.add(img, bg);
        img = g.add(img, bottom);
        img = g.add(img, right);
        Ok(img)
    }

    fn age_of(&self, w: &ArrayD<S>) -> f64 {
        self.age_of_arr(w)
    }

    fn latent_with_age(&self, w: &ArrayD<S>, target: f64) -> ArrayD<S> {
        ToyWorld::latent_with_age(self, w, target)
    }

    fn az_px_per_rad(&self) -> f64 {
        AZ_FACE_BLOCKS_PER_RAD * self.block() as f64
    }
}

impl<S: Scalar> AgePredictor<S> for ToyWorld<S> {
    fn predict_age(&self, g: &mut Graph<S>, image: Var) -> Var {
        let bk = self.block();
        let rows = g.slice_axis(image, 1, 0, 2 * bk);
        let patch = g.slice_axis(rows, 2, 0, 2 * bk);
        let m = g.mean_all(patch);
        let m = g.add_scalar(m, 1.0);
        g.scale(m, 50.0)
    }
}

impl<S: Scalar> IdentityEmbedder<S> for ToyWorld<S> {
    fn dim(&self) -> usize {
        ID_BANDS
    }

    fn embed_identity(&self, g: &mut Graph<S>, image: Var) -> Var {
        let bk = self.block();
        let mut parts = Vec::with_capacity(ID_BANDS);
        for k in 0..ID_BANDS {
            let rows = g.slice_axis(image, 1, (2 + k) * bk, (3 + k) * bk);
            let band = g.slice_axis(rows, 2, 0, 2 * bk);
            parts.push(g.mean_all(band));
        }
        g.concat(0, &parts)
    }
}

impl<S: Scalar> PoseEstimator<S> for ToyWorld<S> {
    fn estimate_pose(&self, g: &mut Graph<S>, image: Var) -> Var {
        let bk = self.block();
        let centroid = |g: &mut Graph<S>, strip: Var, axis_len: usize, sum_axes: (usize, usize)| {
            let w0 = g.add_scalar(strip, 1.0 - BUMP_WEIGHT_FLOOR);
            let w0 = g.relu(w0);
            let s1 = g.sum_axis(w0, sum_axes.0);
            let weights = g.sum_axis(s1, sum_axes.1); // [axis_len]
            let coords: Vec<S> = (0..axis_len).map(|i| S::from_f64(i as f64)).collect();
            let cv = g.leaf(ArrayD::from_shape_vec(IxDyn(&[axis_len]), coords).unwrap());
            let weighted = g.mul(weights, cv);
            let num = g.sum_all(weighted);
            let den = g.sum_all(weights);
            let den = g.add_scalar(den, 1e-9);
            g.div(num, den)
        };
        // azimuth from the bottom strip, bump along columns
        let rows = g.slice_axis(image, 1, 14 * bk, 16 * bk);
        let c_az = centroid(g, rows, 16 * bk, (0, 0)); // sum channels, then rows
        let c_az = g.add_scalar(c_az, -(8.0 * bk as f64));
        let az = g.scale(c_az, 1.0 / self.az_strip_px_per_rad());
        // polar from the right strip, bump along rows
        let cols = g.slice_axis(image, 2, 14 * bk, 16 * bk);
        let cols = g.slice_axis(cols, 1, 0, 14 * bk);
        let cols_t = g.permute(cols, &[0, 2, 1]); // [3, 2B, 14B]
        let c_po = centroid(g, cols_t, 14 * bk, (0, 0));
        let c_po = g.add_scalar(c_po, -(7.0 * bk as f64));
        let po = g.scale(c_po, 1.0 / self.po_strip_px_per_rad());
        g.concat(0, &[az, po])
    }
}

impl<S: Scalar> TextImageEmbedder<S> for ToyWorld<S> {
    fn dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn embed_text(&self, prompt: &str) -> Result<ArrayD<S>, WorldError> {
        if prompt.is_empty() {
            return Err(WorldError::EmptyPrompt);
        }
        let age = first_integer(prompt);
        // base from the prompt with digits masked, so prompts differing only
        // in the age number share a base and differ by an exact age-direction
        // multiple
        let masked: String = prompt
            .chars()
            .map(|c| if c.is_ascii_digit() { '#' } else { c })
            .collect();
        let mut h = Sha256::new();
        h.update(self.cfg.seed.to_le_bytes());
        h.update(masked.as_bytes());
        let digest = h.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let base = unit_columns::<S>(seed, self.cfg.embed_dim, 1)
            .into_shape_with_order(IxDyn(&[self.cfg.embed_dim]))
            .unwrap();
        let mut out = base.mapv(|v| v * S::from_f64(0.7));
        if let Some(a) = age {
            let t = S::from_f64(a.clamp(0, 100) as f64 / 100.0);
            out = out + &self.age_dir.mapv(|v| v * t);
        }
        Ok(out)
    }

    fn embed_image(&self, g: &mut Graph<S>, image: Var) -> Var {
        let bk = self.block();
        let face_px = 12 * bk;
        let rows = g.slice_axis(image, 1, 2 * bk, 14 * bk);
        let face = g.slice_axis(rows, 2, 2 * bk, 14 * bk);
        let flat = g.reshape(face, &[1, 3 * face_px * face_px]);
        let p = g.leaf(self.p_img.clone());
        let feat = g.matmul(flat, p); // [1, E]
        let feat = g.reshape(feat, &[self.cfg.embed_dim]);
        let feat = g.scale(feat, 0.5);
        let age = AgePredictor::predict_age(self, g, image);
        let t = g.scale(age, 0.01); // [1]
        let dir = g.leaf(self.age_dir.clone());
        let aged = g.mul(t, dir); // broadcast [1] x [E]
        g.add(feat, aged)
    }
}

impl<S: Scalar> PerceptualMetric<S> for ToyWorld<S> {
    fn features(&self, g: &mut Graph<S>, image: Var) -> Var {
        let u = self.cfg.image_size;
        let flat = g.reshape(image, &[1, 3 * u * u]);
        let p = g.leaf(self.p_feat.clone());
        let f = g.matmul(flat, p);
        g.reshape(f, &[self.cfg.feat_dim])
    }
}

impl<S: Scalar> LatentCodec<S> for ToyWorld<S> {
    fn latent_shape(&self) -> (usize, usize, usize) {
        (4, 16, 16)
    }

    fn encode(&self, g: &mut Graph<S>, image: Var) -> Var {
        let bk = self.block();
        let cols = g.im2col(image, bk, bk, 0); // [256, 3*bk*bk]
        // block average per channel
        let mut avg = ArrayD::<S>::zeros(IxDyn(&[3 * bk * bk, 3]));
        let inv = S::from_f64(1.0 / (bk * bk) as f64);
        for c in 0..3 {
            for i in 0..bk * bk {
                avg[[c * bk * bk + i, c]] = inv;
            }
        }
        let avg = g.leaf(avg);
        let pm = g.matmul(cols, avg); // [256, 3]
        let pm = g.permute(pm, &[1, 0]); // [3, 256]
        let mix = g.leaf(self.m_mix.clone());
        let lat = g.matmul(mix, pm); // [4, 256]
        g.reshape(lat, &[4, 16, 16])
    }

    fn decode(&self, g: &mut Graph<S>, latent: Var) -> Var {
        let bk = self.block();
        let flat = g.reshape(latent, &[4, 256]);
        let unmix = g.leaf(self.m_unmix.clone());
        let pm = g.matmul(unmix, flat); // [3, 256]
        let mut img = g.reshape(pm, &[3, 16, 16]);
        let mut scale = 1usize;
        while scale < bk {
            img = g.upsample_nearest2(img);
            scale *= 2;
        }
        g.clamp(img, -1.0, 1.0)
    }
}

/// First maximal digit run in a string, as an integer.
fn first_integer(s: &str) -> Option<i64> {
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            return s[start..i].parse().ok();
        }
        i += 1;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{age_prompt, World};

    fn world() -> World<f64> {
        World::toy(7)
    }

    #[test]
    fn sample_z_determinism_and_statistics() {
        let w = world();
        let a = w.generator.sample_z(0);
        let b = w.generator.sample_z(0);
        assert_eq!(a, b);
        let c = w.generator.sample_z(1);
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));
        // empirical mean over ~1e5 entries
        let mut sum = 0.0;
        let mut n = 0usize;
        for seed in 0..196 {
            let z = w.generator.sample_z(seed);
            sum += z.sum();
            n += z.len();
        }
        assert!(n >= 100_000);
        let mean = sum / n as f64;
        assert!(mean.abs() <= 0.02, "empirical mean {mean}");
    }

    #[test]
    fn map_to_w_zero_gives_bias_rows() {
        let w = world();
        let z = ArrayD::<f64>::zeros(IxDyn(&[1, 512]));
        let code = w.generator.map_to_w(&z).unwrap();
        assert_eq!(code.styles.shape(), &[14, 512]);
        let row0 = code.styles.index_axis(ndarray::Axis(0), 0).to_owned();
        for r in 1..14 {
            assert_eq!(code.styles.index_axis(ndarray::Axis(0), r).to_owned(), row0);
        }
        let again = w.generator.map_to_w(&z).unwrap();
        assert_eq!(again.styles, code.styles);
        let bad = ArrayD::<f64>::from_elem(IxDyn(&[1, 512]), f64::NAN);
        assert!(w.generator.map_to_w(&bad).is_err());
    }

    #[test]
    fn render_is_deterministic_and_range_checked() {
        let w = world();
        let code = w.sample_latent(3);
        let p = Pose::new(0.2, -0.1);
        let a = w.render_array(&code.styles, p).unwrap();
        let b = w.render_array(&code.styles, p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 64, 64]);
        for v in a.iter() {
            assert!((-1.0..=1.0).contains(v), "pixel {v} out of range");
        }
        assert!(w.render_array(&code.styles, Pose::new(4.0, 0.0)).is_err());
    }

    #[test]
    fn render_age_roundtrip_over_100_cases() {
        let w = world();
        let mut rng = seeded(100);
        for i in 0..100 {
            let code = w.sample_latent(1000 + i);
            let pose = Pose::new(
                ageview_autograd::store::uniform_f64(&mut rng, -0.6, 0.6),
                ageview_autograd::store::uniform_f64(&mut rng, -0.3, 0.3),
            );
            let img = w.render_array(&code.styles, pose).unwrap();
            let predicted = w.predict_age_array(&img);
            let truth = w.generator.age_of(&code.styles);
            assert!(
                (predicted - truth).abs() <= 0.5,
                "case {i}: {predicted} vs {truth}"
            );
        }
    }

    #[test]
    fn render_age_scalar_30_reads_back() {
        let w = world();
        let toy = ToyWorld::<f64>::new(ToyWorldConfig::new(7));
        let code = w.sample_latent(5);
        let w30 = toy.latent_with_age(&code.styles, 30.0);
        for pose in [Pose::frontal(), Pose::new(0.5, 0.2), Pose::new(-0.4, -0.25)] {
            let img = w.render_array(&w30, pose).unwrap();
            let predicted = w.predict_age_array(&img);
            assert!((predicted - 30.0).abs() <= 0.5, "{predicted}");
        }
    }

    #[test]
    fn render_centroid_shifts_by_documented_constant() {
        let w = world();
        let toy = ToyWorld::<f64>::new(ToyWorldConfig::new(7));
        let code = w.sample_latent(11);
        let img0 = w.render_array(&code.styles, Pose::frontal()).unwrap();
        let img1 = w.render_array(&code.styles, Pose::new(0.4, 0.0)).unwrap();
        // strip-bump centroid moves by az_strip_px_per_rad * 0.4
        let strip_centroid = |img: &ArrayD<f64>| {
            let (mut num, mut den) = (0.0, 0.0);
            for c in 0..3 {
                for y in 56..64 {
                    for x in 0..64 {
                        let wgt = (img[[c, y, x]] + 1.0).max(0.0);
                        num += wgt * x as f64;
                        den += wgt;
                    }
                }
            }
            num / den
        };
        let shift = strip_centroid(&img1) - strip_centroid(&img0);
        let expect = toy.az_strip_px_per_rad() * 0.4;
        assert!((shift - expect).abs() < 0.05, "strip shift {shift} vs {expect}");
        // face blobs translate by the documented pixels-per-radian constant
        let face_argmax_x = |img: &ArrayD<f64>| {
            let (mut best, mut bx) = (f64::NEG_INFINITY, 0usize);
            for y in 8..56 {
                for x in 8..56 {
                    let v = img[[0, y, x]].abs() + img[[1, y, x]].abs() + img[[2, y, x]].abs();
                    if v > best {
                        best = v;
                        bx = x;
                    }
                }
            }
            bx as f64
        };
        let face_shift = face_argmax_x(&img1) - face_argmax_x(&img0);
        let expect_face = w.generator.az_px_per_rad() * 0.4;
        assert!(
            (face_shift - expect_face).abs() <= 1.5,
            "face shift {face_shift} vs {expect_face}"
        );
    }

    #[test]
    fn predict_age_zero_image_and_gradient() {
        let w = world();
        let zero = ArrayD::<f64>::zeros(IxDyn(&[3, 64, 64]));
        assert_eq!(w.predict_age_array(&zero), 50.0);
        // finite-difference on a pixel subset
        let code = w.sample_latent(21);
        let img = w.render_array(&code.styles, Pose::frontal()).unwrap();
        let mut g = Graph::<f64>::new();
        let iv = g.leaf(img.clone());
        let a = w.age.predict_age(&mut g, iv);
        let grads = g.backward(a);
        let dimg = grads.get(iv).unwrap().clone();
        let flat: Vec<f64> = img.iter().cloned().collect();
        let probe: Vec<usize> = vec![0, 5, 70, 64 * 3 + 2, 12287, 4096, 100];
        for &idx in &probe {
            let mut plus = flat.clone();
            plus[idx] += 1e-5;
            let mut minus = flat.clone();
            minus[idx] -= 1e-5;
            let fp = w.predict_age_array(
                &ArrayD::from_shape_vec(IxDyn(&[3, 64, 64]), plus).unwrap(),
            );
            let fm = w.predict_age_array(
                &ArrayD::from_shape_vec(IxDyn(&[3, 64, 64]), minus).unwrap(),
            );
            let fd = (fp - fm) / 2e-5;
            let got = dimg.as_slice().unwrap()[idx];
            assert!(
                (got - fd).abs() <= 1e-3 * fd.abs().max(got.abs()).max(1.0),
                "idx {idx}: {got} vs {fd}"
            );
        }
    }

    #[test]
    fn identity_embedding_pose_invariant_and_separating() {
        let w = world();
        let code = w.sample_latent(31);
        let e1 = w.embed_identity_array(&w.render_array(&code.styles, Pose::frontal()).unwrap());
        let e2 =
            w.embed_identity_array(&w.render_array(&code.styles, Pose::new(0.55, 0.28)).unwrap());
        let cos = cos_arr(&e1, &e2);
        assert!(cos >= 0.999, "same-identity cross-pose cosine {cos}");
        let max_change = e1
            .iter()
            .zip(e2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_change <= 1e-6, "pose leaked into identity: {max_change}");
        // separation over 100 random pairs
        let mut total = 0.0;
        for i in 0..100 {
            let a = w.sample_latent(40_000 + 2 * i);
            let b = w.sample_latent(40_001 + 2 * i);
            let ea = w.embed_identity_array(&w.render_array(&a.styles, Pose::frontal()).unwrap());
            let eb = w.embed_identity_array(&w.render_array(&b.styles, Pose::frontal()).unwrap());
            total += cos_arr(&ea, &eb);
        }
        let mean = total / 100.0;
        assert!(mean < 0.9, "mean cross-identity cosine {mean}");
    }

    #[test]
    fn estimate_pose_roundtrip() {
        let w = world();
        let code = w.sample_latent(41);
        for pose in [
            Pose::new(0.3, -0.1),
            Pose::frontal(),
            Pose::new(-0.6, 0.3),
            Pose::new(0.6, -0.3),
            Pose::new(1.2, 0.6),
        ] {
            let img = w.render_array(&code.styles, pose).unwrap();
            let est = w.estimate_pose_array(&img);
            assert!(
                (est.azimuth - pose.azimuth).abs() <= 0.01,
                "azimuth {} vs {}",
                est.azimuth,
                pose.azimuth
            );
            assert!(
                (est.polar - pose.polar).abs() <= 0.01,
                "polar {} vs {}",
                est.polar,
                pose.polar
            );
        }
        assert_eq!(Pose::new(0.3, -0.1).l2(&Pose::new(0.3, -0.1)), 0.0);
    }

    #[test]
    fn text_embedding_age_direction_is_parallel() {
        let w = world();
        let e = |a: i64| w.clip.embed_text(&age_prompt(a)).unwrap();
        assert_eq!(e(37), e(37));
        let d1 = &e(20) - &e(10);
        let d2 = &e(70) - &e(60);
        let cos = cos_arr(&d1, &d2);
        assert!(cos >= 0.999, "parallelism {cos}");
        let null = w.clip.null_embedding();
        assert!(null.iter().all(|v| *v == 0.0));
        assert!(w.clip.embed_text("").is_err());
        assert_eq!(age_prompt(42), "Person of 42 years old");
    }

    #[test]
    fn codec_roundtrip_psnr_and_shapes() {
        let w = world();
        let zero = ArrayD::<f64>::zeros(IxDyn(&[3, 64, 64]));
        let zl = w.encode_array(&zero);
        assert_eq!(zl.shape(), &[4, 16, 16]);
        assert!(zl.iter().all(|v| *v == 0.0), "zero image must encode to zero latent");
        let mut worst = f64::INFINITY;
        let mut rng = seeded(55);
        for i in 0..100 {
            let code = w.sample_latent(70_000 + i);
            let pose = Pose::new(
                ageview_autograd::store::uniform_f64(&mut rng, -0.6, 0.6),
                ageview_autograd::store::uniform_f64(&mut rng, -0.3, 0.3),
            );
            let img = w.render_array(&code.styles, pose).unwrap();
            let rec = w.decode_array(&w.encode_array(&img));
            let mse: f64 =
                img.iter().zip(rec.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    / img.len() as f64;
            let psnr = 10.0 * (4.0 / mse).log10();
            worst = worst.min(psnr);
        }
        println!("worst codec round-trip PSNR over 100 renders: {worst:.2} dB");
        assert!(worst >= 35.0, "worst round-trip PSNR {worst} dB");
    }

    #[test]
    fn codec_preserves_age_and_identity_exactly_enough() {
        let w = world();
        let code = w.sample_latent(81);
        let img = w.render_array(&code.styles, Pose::new(0.3, 0.1)).unwrap();
        let rec = w.decode_array(&w.encode_array(&img));
        let a1 = w.predict_age_array(&img);
        let a2 = w.predict_age_array(&rec);
        assert!((a1 - a2).abs() < 1e-9, "age through codec: {a1} vs {a2}");
        let e1 = w.embed_identity_array(&img);
        let e2 = w.embed_identity_array(&rec);
        for (x, y) in e1.iter().zip(e2.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn registry_rejects_external_and_unknown() {
        let expect_err = |reg: &crate::world::AdapterRegistry| match World::<f64>::from_registry(
            reg,
            &ToyWorldConfig::new(1),
        ) {
            Err(e) => format!("{e}"),
            Ok(_) => panic!("registry unexpectedly built"),
        };
        let mut reg = crate::world::AdapterRegistry::default();
        reg.age_predictor = "external:/weights/dex.onnx".into();
        let msg = expect_err(&reg);
        assert!(msg.contains("age_predictor"), "{msg}");
        reg.age_predictor = "mystery".into();
        assert!(expect_err(&reg).contains("unknown adapter"));
    }

    #[test]
    fn render_gradient_wrt_latent_matches_fd() {
        // differentiability of the full render -> age path w.r.t. w
        let toy = ToyWorld::<f64>::new(ToyWorldConfig::new(7));
        let w = world();
        let code = w.sample_latent(91);
        let loss = |styles: &ArrayD<f64>| {
            let mut g = Graph::<f64>::inference();
            let wv = g.leaf(styles.clone());
            let img = toy.render(&mut g, wv, Pose::new(0.1, 0.05)).unwrap();
            let a = AgePredictor::predict_age(&toy, &mut g, img);
            g.scalar_val(a)
        };
        let mut g = Graph::<f64>::new();
        let wv = g.leaf(code.styles.clone());
        let img = toy.render(&mut g, wv, Pose::new(0.1, 0.05)).unwrap();
        let a = AgePredictor::predict_age(&toy, &mut g, img);
        let grads = g.backward(a);
        let dw = grads.get(wv).unwrap().clone();
        // probe a few entries
        for idx in [0usize, 100, 511, 512, 7000] {
            let mut p = code.styles.clone();
            let flat = p.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + 1e-5;
            let fp = loss(&p);
            p.as_slice_mut().unwrap()[idx] = orig - 1e-5;
            let fm = loss(&p);
            let fd = (fp - fm) / 2e-5;
            let got = dw.as_slice().unwrap()[idx];
            assert!(
                (got - fd).abs() <= 1e-4 * fd.abs().max(got.abs()).max(1.0),
                "idx {idx}: {got} vs {fd}"
            );
        }
    }

    fn cos_arr(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }
}
