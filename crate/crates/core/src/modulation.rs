//! Latent age modulation: turns a style matrix `w [L, D]` plus an age
//! embedding into an aged style matrix `w + Δw` without any inversion step.
//!
//! The residual is built in three steps:
//! 1. a small MLP (row-shared by default) proposes a shift `w' = w + mlp(w)`;
//! 2. `w'` is normalized per style row (or per column, behind a knob) with a
//!    clamped standard deviation;
//! 3. zero-initialized linear maps of the age embedding produce per-row
//!    scale γ and shift β, giving `Δw = γ ⊙ norm(w') + β`.
//!
//! Both γ/β maps and the MLP output layer start at zero, so the whole module
//! is an exact identity at initialization: `apply(w, e) == w` bitwise. All
//! parameters live under the `agemod.` prefix.

use crate::nn::{init_linear, init_linear_zero, linear, Binding};
use ageview_autograd::store::SeedRng;
use ageview_autograd::{Graph, ParamStore, Scalar, Var};

/// Axis the normalization statistics are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormAxis {
    /// Mean/std per style row, over the D style coordinates (default).
    Row,
    /// Mean/std per style coordinate, over the L rows.
    Col,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AgeModConfig {
    /// Style rows L.
    pub rows: usize,
    /// Style columns D.
    pub cols: usize,
    /// Age-embedding dimension E.
    pub embed_dim: usize,
    /// MLP hidden width.
    pub hidden: usize,
    pub norm_axis: NormAxis,
    /// One MLP shared across style rows (default) or one per row.
    pub share_rows: bool,
}

impl Default for AgeModConfig {
    fn default() -> Self {
        AgeModConfig {
            rows: 14,
            cols: 512,
            embed_dim: 16,
            hidden: 64,
            norm_axis: NormAxis::Row,
            share_rows: true,
        }
    }
}

/// Floor applied to the normalization standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

pub struct AgeModulator {
    pub cfg: AgeModConfig,
}

impl AgeModulator {
    /// Insert all parameters under `agemod.`; the MLP output layer and the
    /// γ/β maps start at zero so the module is an identity.
    pub fn init<S: Scalar>(cfg: AgeModConfig, store: &mut ParamStore<S>, rng: &mut SeedRng) -> Self {
        let std1 = 1.0 / (cfg.cols as f64).sqrt();
        if cfg.share_rows {
            init_linear(store, rng, "agemod.mlp.l1", cfg.cols, cfg.hidden, std1);
            init_linear_zero(store, "agemod.mlp.l2", cfg.hidden, cfg.cols);
        } else {
            for r in 0..cfg.rows {
                init_linear(store, rng, &format!("agemod.mlp.r{r}.l1"), cfg.cols, cfg.hidden, std1);
                init_linear_zero(store, &format!("agemod.mlp.r{r}.l2"), cfg.hidden, cfg.cols);
            }
        }
        init_linear_zero(store, "agemod.gamma", cfg.embed_dim, cfg.rows);
        init_linear_zero(store, "agemod.beta", cfg.embed_dim, cfg.rows);
        AgeModulator { cfg }
    }

    /// MLP-shifted latent `w' = w + mlp(w)`, `[L, D]`.
    fn shifted<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &mut Binding<S>,
        store: &ParamStore<S>,
        w: Var,
    ) -> Var {
        let delta = if self.cfg.share_rows {
            let h = linear(g, b, store, "agemod.mlp.l1", w);
            let h = g.tanh(h);
            linear(g, b, store, "agemod.mlp.l2", h)
        } else {
            let mut rows = Vec::with_capacity(self.cfg.rows);
            for r in 0..self.cfg.rows {
                let wr = g.slice_axis(w, 0, r, r + 1); // [1, D]
                let h = linear(g, b, store, &format!("agemod.mlp.r{r}.l1"), wr);
                let h = g.tanh(h);
                rows.push(linear(g, b, store, &format!("agemod.mlp.r{r}.l2"), h));
            }
            g.concat(0, &rows)
        };
        g.add(w, delta)
    }

    /// The aging residual `Δw [L, D]` for a latent node and an age
    /// embedding node `e` of shape `[1, E]`.
    pub fn residual<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &mut Binding<S>,
        store: &ParamStore<S>,
        w: Var,
        e: Var,
    ) -> Var {
        let wp = self.shifted(g, b, store, w);
        let stat_axis = match self.cfg.norm_axis {
            NormAxis::Row => 1,
            NormAxis::Col => 0,
        };
        let mu = g.mean_axis_keepdim(wp, stat_axis);
        let centered = g.sub(wp, mu);
        let sq = g.square(centered);
        let var = g.mean_axis_keepdim(sq, stat_axis);
        let sigma = g.sqrt(var);
        let sigma = g.clamp(sigma, SIGMA_FLOOR, f64::INFINITY);
        let normed = g.div(centered, sigma);
        let gamma = linear(g, b, store, "agemod.gamma", e); // [1, L]
        let gamma = g.reshape(gamma, &[self.cfg.rows, 1]);
        let beta = linear(g, b, store, "agemod.beta", e);
        let beta = g.reshape(beta, &[self.cfg.rows, 1]);
        let scaled = g.mul(gamma, normed);
        g.add(scaled, beta)
    }

    /// Aged latent `w + Δw`.
    pub fn apply<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &mut Binding<S>,
        store: &ParamStore<S>,
        w: Var,
        e: Var,
    ) -> Var {
        let r = self.residual(g, b, store, w, e);
        g.add(w, r)
    }
}
