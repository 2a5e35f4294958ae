//! Inversion-free multiview sampling: encode the source image once, let the
//! replica donate its attention states for the target age, then run joint
//! DDIM over all requested views with classifier-free guidance. The
//! unconditional branch drops the reference states and the controller but
//! keeps frame attention, so guidance steers age and pose without breaking
//! cross-view coupling.

use crate::aging::{aged_eps, extract_reference_states, AgingBundle};
use crate::diffusion::{guided_eps_frames, sample_ddim_frames, DdimConfig, NoiseSchedule};
use crate::nn::Binding;
use crate::unet::{ControlSignal, ForwardOpts};
use crate::viewpoint::{controller_signals, controller_signals_with, image_condition_tokens};
use crate::world::{Pose, World, WorldError};
use ageview_autograd::store::{normal_array, seeded};
use ageview_autograd::{Graph, ParamStore, Scalar, Var};
use ndarray::ArrayD;

/// Identity whose renders carry pose for the image-conditioning arm. The
/// arm conditions on an RGB render of the requested pose; at sampling time
/// no subject render exists at that pose (that is the problem being
/// solved), so a fixed carrier face provides it.
pub const POSE_CARRIER_SEED: u64 = 424_242;

#[derive(Debug, Clone)]
pub struct SampleOpts {
    pub target_age: f64,
    /// One output frame per pose.
    pub poses: Vec<Pose>,
    pub ddim: DdimConfig,
    /// Seeds the per-frame initial noise.
    pub seed: u64,
    /// Inject the replica's reference states (off only for diagnostics).
    pub use_refs: bool,
    /// Add the pose-token controller's signals.
    pub use_controller: bool,
    /// Splice frame attention across the views.
    pub use_temporal: bool,
    /// Use the image-conditioning arm (`ctrlrgb.`) instead of the
    /// pose-token controller. Mutually exclusive with `use_controller`.
    pub rgb_condition: bool,
}

impl SampleOpts {
    pub fn new(target_age: f64, poses: Vec<Pose>, ddim: DdimConfig, seed: u64) -> Self {
        SampleOpts {
            target_age,
            poses,
            ddim,
            seed,
            use_refs: true,
            use_controller: false,
            use_temporal: false,
            rgb_condition: false,
        }
    }
}

pub struct MultiviewSample<S: Scalar> {
    /// Denoised latents, one per requested pose.
    pub latents: Vec<ArrayD<S>>,
    /// Decoded images `[3, s, s]` in [-1, 1].
    pub images: Vec<ArrayD<S>>,
}

/// Generate the aged multiview stack for one source image.
pub fn sample_multiview<S: Scalar>(
    world: &World<S>,
    store: &ParamStore<S>,
    bundle: &AgingBundle,
    sched: &NoiseSchedule,
    source_image: &ArrayD<S>,
    opts: &SampleOpts,
) -> Result<MultiviewSample<S>, WorldError> {
    assert!(!opts.poses.is_empty(), "at least one pose");
    assert!(
        !(opts.use_controller && opts.rgb_condition),
        "pose-token and image conditioning are alternatives"
    );
    let src_latent = world.encode_array(source_image);
    let mut rng = seeded(opts.seed);
    let init_arrays: Vec<ArrayD<S>> = opts
        .poses
        .iter()
        .map(|_| normal_array::<S>(&mut rng, src_latent.shape(), 0.0, 1.0))
        .collect();

    // Conditioning renders for the image arm, one per pose.
    let carrier_latents: Vec<ArrayD<S>> = if opts.rgb_condition {
        let carrier = world.sample_latent(POSE_CARRIER_SEED);
        opts.poses
            .iter()
            .map(|p| {
                let img = world.render_array(&carrier.styles, *p)?;
                Ok(world.encode_array(&img))
            })
            .collect::<Result<_, WorldError>>()?
    } else {
        Vec::new()
    };

    let mut g = Graph::inference();
    let mut b = Binding::new();
    let src = g.leaf(src_latent);
    let refs: Option<Vec<Var>> = if opts.use_refs {
        Some(extract_reference_states(
            &mut g,
            &mut b,
            store,
            &bundle.aging,
            src,
            opts.target_age,
        ))
    } else {
        None
    };
    let rgb_tokens: Vec<Var> = carrier_latents
        .iter()
        .map(|l| {
            let lat = g.leaf(l.clone());
            image_condition_tokens(&mut g, lat)
        })
        .collect();
    let inits: Vec<Var> = init_arrays.into_iter().map(|a| g.leaf(a)).collect();

    let zs = {
        let b = &mut b;
        let poses = &opts.poses;
        sample_ddim_frames(&mut g, sched, inits, &opts.ddim, |g, frames, t| {
            let t_frac = t as f64 / sched.steps as f64;
            guided_eps_frames(g, opts.ddim.guidance_scale, |g, conditional| {
                let sigs: Option<Vec<ControlSignal>> = if conditional && opts.use_controller {
                    Some(
                        poses
                            .iter()
                            .map(|p| {
                                controller_signals(g, b, store, &bundle.base, src, t_frac, p)
                            })
                            .collect(),
                    )
                } else if conditional && opts.rgb_condition {
                    Some(
                        rgb_tokens
                            .iter()
                            .map(|&tok| {
                                controller_signals_with(
                                    g,
                                    b,
                                    store,
                                    &bundle.base,
                                    "ctrlrgb",
                                    src,
                                    t_frac,
                                    tok,
                                )
                            })
                            .collect(),
                    )
                } else {
                    None
                };
                let fopts = ForwardOpts {
                    t_frac,
                    ref_tokens: if conditional { refs.as_deref() } else { None },
                    control: sigs.as_deref(),
                    temporal: opts.use_temporal,
                    frame_encoding: opts.use_temporal,
                    ..Default::default()
                };
                aged_eps(g, b, store, &bundle.base, frames, &fopts)
            })
        })
    };

    let latents: Vec<ArrayD<S>> = zs.iter().map(|&z| g.val(z).clone()).collect();
    let images = latents.iter().map(|l| world.decode_array(l)).collect();
    Ok(MultiviewSample { latents, images })
}
