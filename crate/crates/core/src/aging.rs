//! Reference-driven age conditioning around the frozen backbone.
//!
//! Two networks share a shape. The backbone (`base.`) stays frozen forever
//! and is the denoiser that actually predicts noise. Its trainable replica
//! (`aging.`) has the input convolution widened by one channel carrying the
//! normalized target age; the widened rows start at zero, so a fresh replica
//! is numerically the backbone. At denoising time the replica runs once on
//! the clean source latent stamped with the target age, its self-attention
//! input tokens are captured, and the backbone attends over those tokens as
//! extra key/value entries at every self-attention site. Age and identity
//! reach the output only through that injection, so dropping it yields the
//! untouched backbone — which is exactly the unconditional branch of
//! classifier-free guidance.

use ageview_autograd::graph::{Graph, Var};
use ageview_autograd::store::{ParamStore, SeedRng};
use ageview_autograd::Scalar;
use ndarray::{ArrayD, IxDyn};

use crate::nn::Binding;
use crate::unet::{
    copy_params_with_prefix, init_unet, unet_forward, widen_conv_rows, ForwardOpts, UNetConfig,
};

/// Parameter prefix of the frozen backbone (stand-in for the pretrained
/// denoiser; never trained).
pub const BASE_PREFIX: &str = "base";
/// Parameter prefix of the replica fine-tuned to donate reference states.
pub const AGING_PREFIX: &str = "aging";
/// Probability of dropping the conditioning (reference states and controller
/// signal) for a training step, so the unconditional branch of
/// classifier-free guidance stays trained.
pub const COND_DROPOUT: f64 = 0.1;

/// Map an age in years to the value filling the extra input channel.
pub fn age_channel_value(age_years: f64) -> f64 {
    2.0 * age_years / 100.0 - 1.0
}

/// Constant `[1, h, w]` plane holding the normalized age.
pub fn age_plane<S: Scalar>(g: &mut Graph<S>, age_years: f64, h: usize, w: usize) -> Var {
    let v = S::from_f64(age_channel_value(age_years));
    g.leaf(ArrayD::from_elem(IxDyn(&[1, h, w]), v))
}

/// Concatenate the age plane onto a `[c, h, w]` latent as the last channel:
/// the replica's input.
pub fn make_age_input<S: Scalar>(g: &mut Graph<S>, z: Var, age_years: f64) -> Var {
    let sh = g.val(z).shape().to_vec();
    assert_eq!(sh.len(), 3, "expected [c, h, w] latent");
    let plane = age_plane(g, age_years, sh[1], sh[2]);
    g.concat(0, &[z, plane])
}

/// Configurations of the backbone and its widened replica.
#[derive(Debug, Clone)]
pub struct AgingBundle {
    pub base: UNetConfig,
    pub aging: UNetConfig,
}

impl AgingBundle {
    /// Widened configuration for a given backbone configuration.
    pub fn aging_config(base: &UNetConfig) -> UNetConfig {
        UNetConfig { in_channels: base.in_channels + 1, ..base.clone() }
    }

    /// Create the backbone under `base.` and its replica under `aging.`.
    ///
    /// The replica shares every weight with the backbone except the input
    /// convolution, which is widened by one channel with zero rows; at this
    /// point the two models are numerically identical on the original
    /// channels regardless of the age value.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        base: &UNetConfig,
    ) -> AgingBundle {
        init_unet(store, rng, BASE_PREFIX, base);
        AgingBundle::replicate_from_base(store, rng, base)
    }

    /// Create only the replica, copying from an already present (typically
    /// pretrained) backbone.
    pub fn replicate_from_base<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        base: &UNetConfig,
    ) -> AgingBundle {
        let aging = AgingBundle::aging_config(base);
        init_unet(store, rng, AGING_PREFIX, &aging);
        let skipped = copy_params_with_prefix(store, BASE_PREFIX, AGING_PREFIX);
        assert_eq!(
            skipped,
            vec![format!("{AGING_PREFIX}.conv_in.w")],
            "only the input convolution should differ in shape"
        );
        widen_conv_rows(
            store,
            &format!("{BASE_PREFIX}.conv_in.w"),
            &format!("{AGING_PREFIX}.conv_in.w"),
            3,
        );
        AgingBundle { base: base.clone(), aging }
    }
}

/// Capture the reference states for one source face: the self-attention
/// input tokens of a clean (`t_frac = 0`) replica pass over the source
/// latent stamped with the target age.
pub fn extract_reference_states<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binding<S>,
    store: &ParamStore<S>,
    cfg: &UNetConfig,
    source_latent: Var,
    age_years: f64,
) -> Vec<Var> {
    let x = make_age_input(g, source_latent, age_years);
    let run = unet_forward(
        g,
        b,
        store,
        AGING_PREFIX,
        cfg,
        &[x],
        &ForwardOpts { t_frac: 0.0, capture_sa: true, ..Default::default() },
    );
    run.sa_tokens.into_iter().next().unwrap()
}

/// Noise prediction by the frozen backbone over one or more noisy frames.
///
/// Identity and age arrive only through `opts.ref_tokens` (from
/// [`extract_reference_states`]), viewpoint through `opts.control`, and
/// cross-frame consistency through `opts.temporal`. With all of them unset
/// this is the plain backbone — the unconditional guidance branch.
pub fn aged_eps<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binding<S>,
    store: &ParamStore<S>,
    base_cfg: &UNetConfig,
    frames: &[Var],
    opts: &ForwardOpts,
) -> Vec<Var> {
    unet_forward(g, b, store, BASE_PREFIX, base_cfg, frames, opts).eps
}
