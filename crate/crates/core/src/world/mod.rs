//! Adapter interfaces for every pretrained component the system consumes,
//! plus the registry that builds them from a run config. The shipped
//! implementation is the deterministic synthetic [`toy`] world; real models
//! can be plugged in later by implementing these traits ("external" entries
//! are accepted by the registry but report a documented construction error
//! since no weights are bundled).

pub mod toy;

use ageview_autograd::store::SeedRng;
use ageview_autograd::{Graph, Scalar, Var};
use ndarray::ArrayD;
use std::sync::Arc;

/// Relative camera pose: azimuth ϕ and polar θ, radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub azimuth: f64,
    pub polar: f64,
}

impl Pose {
    pub const fn new(azimuth: f64, polar: f64) -> Self {
        Pose { azimuth, polar }
    }

    pub fn frontal() -> Self {
        Pose::new(0.0, 0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.azimuth.is_finite()
            && self.polar.is_finite()
            && self.azimuth.abs() <= std::f64::consts::PI
            && self.polar.abs() <= std::f64::consts::FRAC_PI_2
    }

    /// Squared distance in rad², the viewpoint-accuracy metric.
    pub fn l2(&self, other: &Pose) -> f64 {
        let da = self.azimuth - other.azimuth;
        let dp = self.polar - other.polar;
        da * da + dp * dp
    }
}

/// Style-matrix latent of the generator, `[L, D]` rows of style vectors.
#[derive(Debug, Clone)]
pub struct LatentCode<S: Scalar> {
    pub styles: ArrayD<S>,
    /// Provenance: the seed that produced this code, or -1 for derived codes.
    pub seed_id: i64,
}

impl<S: Scalar> LatentCode<S> {
    pub fn rows(&self) -> usize {
        self.styles.shape()[0]
    }
    pub fn cols(&self) -> usize {
        self.styles.shape()[1]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("adapter {key:?} = {value:?}: external adapters carry no bundled weights; \
             implement the {key} trait for the model at that path and register it \
             programmatically, or use \"toy\"")]
    ExternalUnavailable { key: String, value: String },
    #[error("adapter {key:?} = {value:?}: unknown adapter name (expected \"toy\" or \"external:<path>\")")]
    UnknownAdapter { key: String, value: String },
    #[error("pose out of range: azimuth {azimuth} ∉ [-π, π] or polar {polar} ∉ [-π/2, π/2]")]
    PoseOutOfRange { azimuth: f64, polar: f64 },
    #[error("age {age} out of range [0, 100]")]
    AgeOutOfRange { age: f64 },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("non-finite latent input")]
    NonFiniteLatent,
}

/// The 3D-aware face generator (stands in for a tri-plane GAN).
pub trait FaceGenerator<S: Scalar>: Send + Sync {
    /// (L, D) of the style matrix.
    fn latent_shape(&self) -> (usize, usize);
    /// Pre-map noise vector z, `[1, zdim]`, standard normal.
    fn sample_z(&self, seed: u64) -> ArrayD<S>;
    /// Fixed affine map + row broadcast into the style matrix.
    fn map_to_w(&self, z: &ArrayD<S>) -> Result<LatentCode<S>, WorldError>;
    /// Differentiable render; `w` is a `[L, D]` tape node.
    fn render(&self, g: &mut Graph<S>, w: Var, pose: Pose) -> Result<Var, WorldError>;
    /// The generator's intrinsic age scalar of a latent, years in [0, 100].
    fn age_of(&self, w: &ArrayD<S>) -> f64;
    /// Shift a latent along the generator's age direction until `age_of`
    /// reads `target` (exact unless clamped). Evaluation protocols use this
    /// to pin source ages.
    fn latent_with_age(&self, w: &ArrayD<S>, target: f64) -> ArrayD<S>;
    /// Documented horizontal face shift, pixels per azimuth radian.
    fn az_px_per_rad(&self) -> f64;
}

/// Age estimator (stands in for a pretrained age predictor).
pub trait AgePredictor<S: Scalar>: Send + Sync {
    /// Differentiable predicted age in years from a `[3, H, W]` image node.
    fn predict_age(&self, g: &mut Graph<S>, image: Var) -> Var;
}

/// Identity embedder (stands in for a pretrained face-recognition net).
pub trait IdentityEmbedder<S: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    /// Differentiable identity vector; pose-invariant by construction.
    fn embed_identity(&self, g: &mut Graph<S>, image: Var) -> Var;
}

/// Head-pose estimator returning `[2]` = (azimuth, polar) radians.
pub trait PoseEstimator<S: Scalar>: Send + Sync {
    fn estimate_pose(&self, g: &mut Graph<S>, image: Var) -> Var;
}

/// Joint text/image embedding space (stands in for a contrastive encoder).
pub trait TextImageEmbedder<S: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    /// Deterministic prompt embedding, `[E]`.
    fn embed_text(&self, prompt: &str) -> Result<ArrayD<S>, WorldError>;
    /// Differentiable image embedding, `[E]`.
    fn embed_image(&self, g: &mut Graph<S>, image: Var) -> Var;
    /// The all-zero embedding reserved for unconditional branches.
    fn null_embedding(&self) -> ArrayD<S> {
        ArrayD::zeros(ndarray::IxDyn(&[self.dim()]))
    }
}

/// Perceptual feature extractor backing the perceptual loss.
pub trait PerceptualMetric<S: Scalar>: Send + Sync {
    /// Differentiable feature vector; the loss is the feature-space MSE.
    fn features(&self, g: &mut Graph<S>, image: Var) -> Var;
}

/// Image-latent codec of the diffusion backbone.
pub trait LatentCodec<S: Scalar>: Send + Sync {
    /// (C_l, H_l, W_l).
    fn latent_shape(&self) -> (usize, usize, usize);
    fn encode(&self, g: &mut Graph<S>, image: Var) -> Var;
    fn decode(&self, g: &mut Graph<S>, latent: Var) -> Var;
}

/// The age-prompt template. Integer ages only.
pub fn age_prompt(age_years: i64) -> String {
    format!("Person of {age_years} years old")
}

/// Adapter registry entries, one per configurable component.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterRegistry {
    pub generator: String,
    pub text_embedder: String,
    pub age_predictor: String,
    pub identity_embedder: String,
    pub pose_estimator: String,
    pub perceptual_metric: String,
    pub latent_codec: String,
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        AdapterRegistry {
            generator: "toy".into(),
            text_embedder: "toy".into(),
            age_predictor: "toy".into(),
            identity_embedder: "toy".into(),
            pose_estimator: "toy".into(),
            perceptual_metric: "toy".into(),
            latent_codec: "toy".into(),
        }
    }
}

/// Bundle of all adapters plus shared geometry.
#[derive(Clone)]
pub struct World<S: Scalar> {
    pub image_size: usize,
    pub generator: Arc<dyn FaceGenerator<S>>,
    pub age: Arc<dyn AgePredictor<S>>,
    pub identity: Arc<dyn IdentityEmbedder<S>>,
    pub pose: Arc<dyn PoseEstimator<S>>,
    pub clip: Arc<dyn TextImageEmbedder<S>>,
    pub perceptual: Arc<dyn PerceptualMetric<S>>,
    pub codec: Arc<dyn LatentCodec<S>>,
}

impl<S: Scalar> World<S> {
    /// Build the bundle from registry entries. Every "toy" entry resolves to
    /// one shared toy-world instance so layout constants agree across
    /// components; "external:<path>" is recognized but unavailable here.
    pub fn from_registry(
        reg: &AdapterRegistry,
        cfg: &toy::ToyWorldConfig,
    ) -> Result<Self, WorldError> {
        let check = |key: &str, value: &str| -> Result<(), WorldError> {
            if value == "toy" {
                Ok(())
            } else if value.starts_with("external:") {
                Err(WorldError::ExternalUnavailable { key: key.into(), value: value.into() })
            } else {
                Err(WorldError::UnknownAdapter { key: key.into(), value: value.into() })
            }
        };
        check("generator", &reg.generator)?;
        check("text_embedder", &reg.text_embedder)?;
        check("age_predictor", &reg.age_predictor)?;
        check("identity_embedder", &reg.identity_embedder)?;
        check("pose_estimator", &reg.pose_estimator)?;
        check("perceptual_metric", &reg.perceptual_metric)?;
        check("latent_codec", &reg.latent_codec)?;
        let t = Arc::new(toy::ToyWorld::<S>::new(cfg.clone()));
        Ok(World {
            image_size: cfg.image_size,
            generator: t.clone(),
            age: t.clone(),
            identity: t.clone(),
            pose: t.clone(),
            clip: t.clone(),
            perceptual: t.clone(),
            codec: t,
        })
    }

    pub fn toy(seed: u64) -> Self {
        Self::from_registry(&AdapterRegistry::default(), &toy::ToyWorldConfig::new(seed))
            .expect("toy registry always builds")
    }

    /// Render to a plain array on a throwaway inference tape.
    pub fn render_array(&self, w: &ArrayD<S>, pose: Pose) -> Result<ArrayD<S>, WorldError> {
        let mut g = Graph::inference();
        let wv = g.leaf(w.clone());
        let img = self.generator.render(&mut g, wv, pose)?;
        Ok(g.val(img).clone())
    }

    pub fn predict_age_array(&self, image: &ArrayD<S>) -> f64 {
        let mut g = Graph::inference();
        let iv = g.leaf(image.clone());
        let a = self.age.predict_age(&mut g, iv);
        g.scalar_val(a).as_f64()
    }

    pub fn embed_identity_array(&self, image: &ArrayD<S>) -> ArrayD<S> {
        let mut g = Graph::inference();
        let iv = g.leaf(image.clone());
        let e = self.identity.embed_identity(&mut g, iv);
        g.val(e).clone()
    }

    pub fn estimate_pose_array(&self, image: &ArrayD<S>) -> Pose {
        let mut g = Graph::inference();
        let iv = g.leaf(image.clone());
        let p = self.pose.estimate_pose(&mut g, iv);
        let v = g.val(p);
        Pose::new(v[[0]].as_f64(), v[[1]].as_f64())
    }

    pub fn encode_array(&self, image: &ArrayD<S>) -> ArrayD<S> {
        let mut g = Graph::inference();
        let iv = g.leaf(image.clone());
        let z = self.codec.encode(&mut g, iv);
        g.val(z).clone()
    }

    pub fn decode_array(&self, latent: &ArrayD<S>) -> ArrayD<S> {
        let mut g = Graph::inference();
        let lv = g.leaf(latent.clone());
        let x = self.codec.decode(&mut g, lv);
        g.val(x).clone()
    }

    /// Seeded sample of a latent code: z then the style map.
    pub fn sample_latent(&self, seed: u64) -> LatentCode<S> {
        let z = self.generator.sample_z(seed);
        self.generator.map_to_w(&z).expect("sampled z is finite")
    }

    /// Fresh RNG unrelated helper retained for call sites needing raw draws.
    pub fn rng(seed: u64) -> SeedRng {
        ageview_autograd::store::seeded(seed)
    }
}
