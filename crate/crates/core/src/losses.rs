//! Training losses for the dataset-pipeline stage and their weighted total.
//!
//! Six terms: age regression, directional text/image alignment, identity
//! preservation, perceptual feature distance, pixel reconstruction, and a
//! penalty on the residual magnitude. The total is the λ-weighted sum.

use crate::nn::cosine;
use ageview_autograd::{Graph, Scalar, Var};

/// Degeneracy floor for cosine terms: below this norm the direction is
/// undefined, the term falls back to its worst value, and a flag is raised.
pub const COSINE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub age: f64,
    pub clip: f64,
    pub id: f64,
    pub perceptual: f64,
    pub l2: f64,
    pub norm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { age: 1.0, clip: 0.6, id: 0.2, perceptual: 0.1, l2: 0.1, norm: 0.05 }
    }
}

impl LossWeights {
    pub fn sum(&self) -> f64 {
        self.age + self.clip + self.id + self.perceptual + self.l2 + self.norm
    }
}

/// Mean absolute error between predicted and target ages (years). Inputs are
/// same-shaped nodes; a batch axis is averaged out.
pub fn age_loss<S: Scalar>(g: &mut Graph<S>, predicted: Var, target: Var) -> Var {
    let d = g.sub(predicted, target);
    let d = g.abs(d);
    g.mean_all(d)
}

/// Directional alignment: 1 - cos(Δimage, Δtext). Returns the loss node and
/// whether either direction was degenerate (zero-norm), in which case the
/// loss is the constant worst value 1.
pub fn directional_clip_loss<S: Scalar>(
    g: &mut Graph<S>,
    delta_image: Var,
    delta_text: Var,
) -> (Var, bool) {
    match cosine(g, delta_image, delta_text, COSINE_FLOOR) {
        Some(c) => {
            let nc = g.neg(c);
            (g.add_scalar(nc, 1.0), false)
        }
        None => (g.scalar_f64(1.0), true),
    }
}

/// Identity preservation: 1 - cos of the two identity embeddings.
pub fn identity_loss<S: Scalar>(g: &mut Graph<S>, e_src: Var, e_out: Var) -> (Var, bool) {
    match cosine(g, e_src, e_out, COSINE_FLOOR) {
        Some(c) => {
            let nc = g.neg(c);
            (g.add_scalar(nc, 1.0), false)
        }
        None => (g.scalar_f64(1.0), true),
    }
}

/// Mean squared difference of two same-shaped nodes (pixels or latents).
pub fn l2_loss<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.square(d);
    g.mean_all(d)
}

/// Feature-space MSE; callers pass feature nodes from the perceptual adapter.
pub fn perceptual_loss<S: Scalar>(g: &mut Graph<S>, feat_a: Var, feat_b: Var) -> Var {
    l2_loss(g, feat_a, feat_b)
}

/// Penalty on the aging-residual magnitude.
pub fn norm_loss<S: Scalar>(g: &mut Graph<S>, residual: Var) -> Var {
    let sq = g.square(residual);
    g.mean_all(sq)
}

/// The six term nodes of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub age: Var,
    pub clip: Var,
    pub id: Var,
    pub perceptual: Var,
    pub l2: Var,
    pub norm: Var,
}

/// λ-weighted total as a tape node.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, w: &LossWeights, t: &LossTerms) -> Var {
    let mut acc = g.scale(t.age, w.age);
    for (lambda, term) in [
        (w.clip, t.clip),
        (w.id, t.id),
        (w.perceptual, t.perceptual),
        (w.l2, t.l2),
        (w.norm, t.norm),
    ] {
        let s = g.scale(term, lambda);
        acc = g.add(acc, s);
    }
    acc
}

/// Scalar snapshot of one step's losses, for logs and reports.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub age: f64,
    pub clip: f64,
    pub id: f64,
    pub perceptual: f64,
    pub l2: f64,
    pub norm: f64,
    pub total: f64,
    /// True when the directional term hit the zero-norm fallback.
    pub clip_degenerate: bool,
}

impl LossReport {
    pub fn from_graph<S: Scalar>(
        g: &Graph<S>,
        t: &LossTerms,
        total: Var,
        clip_degenerate: bool,
    ) -> Self {
        LossReport {
            age: g.scalar_val(t.age).as_f64(),
            clip: g.scalar_val(t.clip).as_f64(),
            id: g.scalar_val(t.id).as_f64(),
            perceptual: g.scalar_val(t.perceptual).as_f64(),
            l2: g.scalar_val(t.l2).as_f64(),
            norm: g.scalar_val(t.norm).as_f64(),
            total: g.scalar_val(total).as_f64(),
            clip_degenerate,
        }
    }
}
