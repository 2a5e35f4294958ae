//! Forward noising schedule, the deterministic DDIM sampler, and
//! classifier-free guidance.
//!
//! The cumulative signal level ᾱ_t falls linearly from ᾱ_0 = 1 to
//! ᾱ_T = α_min > 0 over T steps, so both endpoints are well conditioned:
//! `z_t = √ᾱ_t · z_0 + √(1-ᾱ_t) · ε`.
//!
//! Sampling runs η = 0 DDIM over a decimated timestep grid from T down
//! to 0; with a zero noise prediction the sampler telescopes to
//! `z_T / √ᾱ_T`, which the tests pin down in closed form.

use ageview_autograd::store::SeedRng;
use ageview_autograd::{Graph, Scalar, Var};
use rand::Rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    /// Training timesteps T.
    pub steps: usize,
    /// Terminal cumulative signal level ᾱ_T.
    pub alpha_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { steps: 1000, alpha_min: 0.0025 }
    }
}

impl NoiseSchedule {
    pub fn new(steps: usize, alpha_min: f64) -> Self {
        assert!(steps >= 1);
        assert!(alpha_min > 0.0 && alpha_min < 1.0);
        NoiseSchedule { steps, alpha_min }
    }

    /// Cumulative signal level ᾱ_t for t in 0..=T; ᾱ_0 = 1 exactly.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.steps, "timestep {t} beyond schedule end {}", self.steps);
        1.0 - (t as f64 / self.steps as f64) * (1.0 - self.alpha_min)
    }

    /// Forward noising of a clean latent at training timestep t ∈ [1, T].
    pub fn add_noise<S: Scalar>(&self, g: &mut Graph<S>, z0: Var, eps: Var, t: usize) -> Var {
        assert!((1..=self.steps).contains(&t), "training timestep {t} outside [1, {}]", self.steps);
        let ab = self.alpha_bar(t);
        let s = g.scale(z0, ab.sqrt());
        let n = g.scale(eps, (1.0 - ab).sqrt());
        g.add(s, n)
    }

    /// Uniform training timestep in [1, T].
    pub fn sample_timestep(&self, rng: &mut SeedRng) -> usize {
        rng.gen_range(1..=self.steps)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DdimConfig {
    /// Number of sampler intervals (the grid has steps+1 points).
    pub steps: usize,
    /// Classifier-free guidance scale s.
    pub guidance_scale: f64,
}

impl Default for DdimConfig {
    fn default() -> Self {
        DdimConfig { steps: 100, guidance_scale: 3.0 }
    }
}

/// Decimated sampler grid: `n+1` strictly decreasing timesteps from T to 0.
pub fn ddim_timesteps(t_total: usize, n: usize) -> Vec<usize> {
    assert!(n >= 1 && n <= t_total, "sampler steps {n} must be in [1, {t_total}]");
    let mut out = Vec::with_capacity(n + 1);
    for k in (0..=n).rev() {
        out.push(((t_total as f64) * k as f64 / n as f64).round() as usize);
    }
    debug_assert!(out.windows(2).all(|w| w[0] > w[1]));
    out
}

/// One η = 0 DDIM update from t_hi to t_lo given the noise prediction at
/// t_hi: reconstruct ẑ_0, then re-noise deterministically to t_lo.
pub fn ddim_step<S: Scalar>(
    g: &mut Graph<S>,
    sched: &NoiseSchedule,
    z_t: Var,
    eps_hat: Var,
    t_hi: usize,
    t_lo: usize,
) -> Var {
    assert!(t_lo < t_hi);
    let ab_hi = sched.alpha_bar(t_hi);
    let ab_lo = sched.alpha_bar(t_lo);
    let noise_part = g.scale(eps_hat, (1.0 - ab_hi).sqrt());
    let signal = g.sub(z_t, noise_part);
    let z0_hat = g.scale(signal, 1.0 / ab_hi.sqrt());
    let carried = g.scale(z0_hat, ab_lo.sqrt());
    let renoise = g.scale(eps_hat, (1.0 - ab_lo).sqrt());
    g.add(carried, renoise)
}

/// Full DDIM trajectory. `eps_fn(g, z_t, t)` returns the (already guided)
/// noise prediction at timestep t.
pub fn sample_ddim<S: Scalar>(
    g: &mut Graph<S>,
    sched: &NoiseSchedule,
    init: Var,
    cfg: &DdimConfig,
    mut eps_fn: impl FnMut(&mut Graph<S>, Var, usize) -> Var,
) -> Var {
    let grid = ddim_timesteps(sched.steps, cfg.steps);
    let mut z = init;
    for pair in grid.windows(2) {
        let (t_hi, t_lo) = (pair[0], pair[1]);
        let eps_hat = eps_fn(g, z, t_hi);
        z = ddim_step(g, sched, z, eps_hat, t_hi, t_lo);
    }
    z
}

/// Joint DDIM over several frames sharing one timestep grid. `eps_fn`
/// receives all current frames and returns one prediction per frame, so
/// predictions may couple frames (temporal attention).
pub fn sample_ddim_frames<S: Scalar>(
    g: &mut Graph<S>,
    sched: &NoiseSchedule,
    inits: Vec<Var>,
    cfg: &DdimConfig,
    mut eps_fn: impl FnMut(&mut Graph<S>, &[Var], usize) -> Vec<Var>,
) -> Vec<Var> {
    let grid = ddim_timesteps(sched.steps, cfg.steps);
    let mut zs = inits;
    for pair in grid.windows(2) {
        let (t_hi, t_lo) = (pair[0], pair[1]);
        let eps = eps_fn(g, &zs, t_hi);
        assert_eq!(eps.len(), zs.len(), "one prediction per frame");
        zs = zs
            .iter()
            .zip(eps)
            .map(|(&z, e)| ddim_step(g, sched, z, e, t_hi, t_lo))
            .collect();
    }
    zs
}

/// Classifier-free guidance: `ε_u + s (ε_c - ε_u)`. `branch(g, conditional)`
/// runs one model pass. At s = 0 or s = 1 the unused pass is skipped
/// entirely and the kept branch is returned unchanged, so those settings are
/// bitwise identical to a single-branch model.
pub fn guided_eps<S: Scalar>(
    g: &mut Graph<S>,
    s: f64,
    mut branch: impl FnMut(&mut Graph<S>, bool) -> Var,
) -> Var {
    if s == 0.0 {
        branch(g, false)
    } else if s == 1.0 {
        branch(g, true)
    } else {
        let eps_u = branch(g, false);
        let eps_c = branch(g, true);
        let d = g.sub(eps_c, eps_u);
        let d = g.scale(d, s);
        g.add(eps_u, d)
    }
}

/// Frame version of [`guided_eps`] with the same branch-skip semantics.
pub fn guided_eps_frames<S: Scalar>(
    g: &mut Graph<S>,
    s: f64,
    mut branch: impl FnMut(&mut Graph<S>, bool) -> Vec<Var>,
) -> Vec<Var> {
    if s == 0.0 {
        branch(g, false)
    } else if s == 1.0 {
        branch(g, true)
    } else {
        let u = branch(g, false);
        let c = branch(g, true);
        assert_eq!(u.len(), c.len());
        u.into_iter()
            .zip(c)
            .map(|(eu, ec)| {
                let d = g.sub(ec, eu);
                let d = g.scale(d, s);
                g.add(eu, d)
            })
            .collect()
    }
}

/// Noise-prediction objective for one (z_0, t, ε) triple: noise forward,
/// run the model, return the MSE node.
pub fn noise_prediction_loss<S: Scalar>(
    g: &mut Graph<S>,
    sched: &NoiseSchedule,
    z0: Var,
    t: usize,
    eps: Var,
    model: impl FnOnce(&mut Graph<S>, Var, usize) -> Var,
) -> Var {
    let zt = sched.add_noise(g, z0, eps, t);
    let eps_hat = model(g, zt, t);
    crate::losses::l2_loss(g, eps_hat, eps)
}
