//! Viewpoint-aware face aging at desk scale.
//!
//! Two halves. First, a dataset pipeline: a learned residual direction in a
//! generator's style space ("age modulation") turns one sampled identity into
//! a multiview stack of age-edited renders. Second, a latent-diffusion aging
//! model conditioned on a reference network's attention states, steered in
//! viewpoint by a zero-initialized control branch, and made view-consistent
//! by frame-axis temporal attention.
//!
//! Every pretrained component (generator, age predictor, identity embedder,
//! pose estimator, text/image embedder, perceptual metric, latent codec)
//! sits behind an adapter trait with a deterministic synthetic "toy world"
//! implementation, so the whole system trains and verifies on a CPU.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! concrete aliases below fix the default precision.

pub mod aging;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod harness;
pub mod losses;
pub mod modulation;
pub mod nn;
pub mod temporal;
pub mod unet;
pub mod viewpoint;
pub mod world;

pub use ageview_autograd::{Adam, AdamConfig, Gradients, Graph, ParamStore, Scalar, Var};

/// Default numeric precision of the shipped binaries.
pub type Real = f64;

pub type RealGraph = Graph<Real>;
pub type RealStore = ParamStore<Real>;
