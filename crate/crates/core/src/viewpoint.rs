//! Viewpoint control in two steps.
//!
//! A novel-view denoiser (`view.`) is fine-tuned from the frozen backbone: it
//! takes the noisy target latent concatenated with the clean source-view
//! latent, plus the target angles as a cross-attention token, and learns to
//! denoise toward the target view. Its encoder is then grafted onto the aging
//! model as a control branch (`ctrl.branch.`) whose features are projected by
//! zero-initialized 1×1 convolutions (`ctrl.proj.*`) and added to the aging
//! UNet's skip and mid activations — a no-op at attachment, trained afterward
//! while everything else stays frozen.

use ageview_autograd::graph::{Graph, Var};
use ageview_autograd::store::{
    normal_array, seeded, uniform_f64, zeros_array, ParamStore, SeedRng,
};
use ageview_autograd::{Adam, AdamConfig, Scalar};
use ndarray::{ArrayD, IxDyn};

use crate::aging::BASE_PREFIX;
use crate::diffusion::NoiseSchedule;
use crate::nn::{conv2d, Binding};
use crate::unet::{
    copy_params_with_prefix, init_unet, init_unet_encoder, slice_conv_rows,
    unet_encoder_forward, unet_forward, widen_conv_rows, ControlSignal, ForwardOpts,
    UNetConfig,
};
use crate::world::{Pose, World};

/// Parameter prefix of the novel-view model fine-tuned in stage two.
pub const VIEW_PREFIX: &str = "view";
/// Parameter prefix of the controller (branch encoder and projections).
pub const CTRL_PREFIX: &str = "ctrl";

/// Half-width of the azimuth range (radians) sampled for training views.
pub const POSE_RANGE_AZ: f64 = 0.6;
/// Half-width of the polar range (radians) sampled for training views.
pub const POSE_RANGE_PO: f64 = 0.3;

/// Pose drawn uniformly from the training box.
pub fn sample_training_pose(rng: &mut SeedRng) -> Pose {
    Pose::new(
        uniform_f64(rng, -POSE_RANGE_AZ, POSE_RANGE_AZ),
        uniform_f64(rng, -POSE_RANGE_PO, POSE_RANGE_PO),
    )
}

/// Angles as the smooth features fed to attention: sines and cosines, which
/// avoid the wrap-around discontinuity of raw radians.
pub fn angle_features(pose: &Pose) -> [f64; 4] {
    [pose.azimuth.sin(), pose.azimuth.cos(), pose.polar.sin(), pose.polar.cos()]
}

/// Invert [`angle_features`].
pub fn angle_decode(f: &[f64; 4]) -> Pose {
    Pose::new(f[0].atan2(f[1]), f[2].atan2(f[3]))
}

/// The `[1, 4]` context token for a pose.
pub fn angle_token<S: Scalar>(g: &mut Graph<S>, pose: &Pose) -> Var {
    let f = angle_features(pose);
    let data: Vec<S> = f.iter().map(|&x| S::from_f64(x)).collect();
    g.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 4]), data).unwrap())
}

/// Configuration of the novel-view model.
#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub view: UNetConfig,
}

impl ViewBundle {
    /// The view model sees the noisy latent and the source latent stacked on
    /// the channel axis.
    pub fn view_config(base: &UNetConfig) -> UNetConfig {
        UNetConfig { in_channels: 2 * base.in_channels, ..base.clone() }
    }

    /// Create `view.` as a copy of the backbone with the input convolution
    /// widened to the stacked input; the added rows start at zero.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        base: &UNetConfig,
    ) -> ViewBundle {
        let view = ViewBundle::view_config(base);
        init_unet(store, rng, VIEW_PREFIX, &view);
        let skipped = copy_params_with_prefix(store, BASE_PREFIX, VIEW_PREFIX);
        assert_eq!(skipped, vec![format!("{VIEW_PREFIX}.conv_in.w")]);
        widen_conv_rows(
            store,
            &format!("{BASE_PREFIX}.conv_in.w"),
            &format!("{VIEW_PREFIX}.conv_in.w"),
            3,
        );
        ViewBundle { view }
    }
}

/// One denoising call of the view model.
pub fn view_eps<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binding<S>,
    store: &ParamStore<S>,
    cfg: &UNetConfig,
    z_t: Var,
    source_latent: Var,
    t_frac: f64,
    pose: &Pose,
) -> Var {
    let x = g.concat(0, &[z_t, source_latent]);
    let tok = angle_token(g, pose);
    let ctx = [tok];
    let run = unet_forward(
        g,
        b,
        store,
        VIEW_PREFIX,
        cfg,
        &[x],
        &ForwardOpts { t_frac, ctx: Some(&ctx), ..Default::default() },
    );
    run.eps[0]
}

/// A training example for the view model: clean latents of the same identity
/// seen frontally and from `pose`.
#[derive(Debug, Clone)]
pub struct ViewPair<S: Scalar> {
    pub source_latent: ArrayD<S>,
    pub target_latent: ArrayD<S>,
    pub pose: Pose,
}

/// Render and encode training pairs: per identity one frontal source and
/// `views_per_identity` posed targets.
pub fn make_view_pairs<S: Scalar>(
    world: &World<S>,
    n_identities: usize,
    views_per_identity: usize,
    seed: u64,
) -> Vec<ViewPair<S>> {
    let mut rng = seeded(seed);
    let mut pairs = Vec::with_capacity(n_identities * views_per_identity);
    for i in 0..n_identities {
        let code = world.sample_latent(seed.wrapping_add(i as u64));
        let src_img = world
            .render_array(&code.styles, Pose::frontal())
            .expect("frontal pose is valid");
        let source_latent = world.encode_array(&src_img);
        for _ in 0..views_per_identity {
            let pose = sample_training_pose(&mut rng);
            let tgt_img = world.render_array(&code.styles, pose).expect("pose box is valid");
            pairs.push(ViewPair {
                source_latent: source_latent.clone(),
                target_latent: world.encode_array(&tgt_img),
                pose,
            });
        }
    }
    pairs
}

/// Mean noise-prediction loss of the view model over fixed (pair, timestep,
/// noise) probes; deterministic for a given seed.
pub fn eval_view_loss<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &UNetConfig,
    sched: &NoiseSchedule,
    pairs: &[ViewPair<S>],
    probe_timesteps: &[usize],
    seed: u64,
) -> f64 {
    let mut rng = seeded(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in pairs {
        for &t in probe_timesteps {
            let noise = normal_array::<S>(&mut rng, pair.target_latent.shape(), 0.0, 1.0);
            let mut g = Graph::inference();
            let mut b = Binding::new();
            let z0 = g.leaf(pair.target_latent.clone());
            let eps = g.leaf(noise);
            let zt = sched.add_noise(&mut g, z0, eps, t);
            let src = g.leaf(pair.source_latent.clone());
            let t_frac = t as f64 / sched.steps as f64;
            let eps_hat = view_eps(&mut g, &mut b, store, cfg, zt, src, t_frac, &pair.pose);
            let d = g.sub(eps_hat, eps);
            let sq = g.square(d);
            let l = g.mean_all(sq);
            total += g.scalar_val(l).as_f64();
            count += 1;
        }
    }
    total / count as f64
}

/// Fine-tune `view.` with Adam on the noise-prediction objective, cycling
/// through the pairs. Returns the per-step loss log.
pub fn finetune_view_model<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &UNetConfig,
    sched: &NoiseSchedule,
    pairs: &[ViewPair<S>],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Vec<f64> {
    assert!(!pairs.is_empty());
    let mut adam = Adam::new(AdamConfig::with_lr(lr));
    let mut rng = seeded(seed);
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let pair = &pairs[step % pairs.len()];
        let t = sched.sample_timestep(&mut rng);
        let noise = normal_array::<S>(&mut rng, pair.target_latent.shape(), 0.0, 1.0);
        let mut g = Graph::new();
        let mut b = Binding::new();
        let z0 = g.leaf(pair.target_latent.clone());
        let eps = g.leaf(noise);
        let zt = sched.add_noise(&mut g, z0, eps, t);
        let src = g.leaf(pair.source_latent.clone());
        let t_frac = t as f64 / sched.steps as f64;
        let eps_hat = view_eps(&mut g, &mut b, store, cfg, zt, src, t_frac, &pair.pose);
        let d = g.sub(eps_hat, eps);
        let sq = g.square(d);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        let gm = b.grads(&grads, |n| n.starts_with("view."));
        adam.step(store, &gm);
        log.push(g.scalar_val(loss).as_f64());
    }
    log
}

/// Graft the controller onto the store: `ctrl.branch.` is the view model's
/// encoder with the input convolution narrowed to the conditioning latent
/// alone, and `ctrl.proj.{hi,lo,mid}` are zero 1×1 projections, so the
/// controller's output starts as exactly zero.
pub fn attach_controller<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut SeedRng,
    base: &UNetConfig,
) {
    attach_controller_at(store, rng, base, CTRL_PREFIX);
}

/// [`attach_controller`] under an arbitrary prefix, so experiment arms can
/// carry their own branch without touching the product controller.
pub fn attach_controller_at<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut SeedRng,
    base: &UNetConfig,
    prefix: &str,
) {
    let branch = format!("{prefix}.branch");
    init_unet_encoder(store, rng, &branch, base);
    let skipped = copy_params_with_prefix(store, VIEW_PREFIX, &branch);
    for name in &skipped {
        let expected = name == &format!("{branch}.conv_in.w")
            || name.starts_with(&format!("{branch}.u1."))
            || name.starts_with(&format!("{branch}.u2."))
            || name.starts_with(&format!("{branch}.out."));
        assert!(expected, "unexpected skipped parameter {name}");
    }
    slice_conv_rows(
        store,
        &format!("{VIEW_PREFIX}.conv_in.w"),
        &format!("{branch}.conv_in.w"),
        base.in_channels,
        3,
    );
    let (w1, w2) = (base.base_width, base.width2());
    for (name, c) in [("hi", w1), ("lo", w2), ("mid", w2)] {
        store.insert(&format!("{prefix}.proj.{name}.w"), zeros_array::<S>(&[c, c]));
        store.insert(&format!("{prefix}.proj.{name}.b"), zeros_array::<S>(&[c]));
    }
}

/// Run the control branch on the conditioning latent and project its
/// features into additions for the aging UNet.
pub fn controller_signals<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binding<S>,
    store: &ParamStore<S>,
    base: &UNetConfig,
    cond_latent: Var,
    t_frac: f64,
    pose: &Pose,
) -> ControlSignal {
    let tok = angle_token(g, pose);
    controller_signals_with(g, b, store, base, CTRL_PREFIX, cond_latent, t_frac, tok)
}

/// [`controller_signals`] with an explicit prefix and conditioning token
/// matrix, shared by the pose-token controller and the image-token arm.
#[allow(clippy::too_many_arguments)]
pub fn controller_signals_with<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binding<S>,
    store: &ParamStore<S>,
    base: &UNetConfig,
    prefix: &str,
    cond_latent: Var,
    t_frac: f64,
    ctx_tokens: Var,
) -> ControlSignal {
    let enc = unet_encoder_forward(
        g,
        b,
        store,
        &format!("{prefix}.branch"),
        base,
        cond_latent,
        t_frac,
        Some(ctx_tokens),
    );
    ControlSignal {
        skip_hi: conv2d(g, b, store, &format!("{prefix}.proj.hi"), enc.hi, 1, 1, 0),
        skip_lo: conv2d(g, b, store, &format!("{prefix}.proj.lo"), enc.lo, 1, 1, 0),
        mid: conv2d(g, b, store, &format!("{prefix}.proj.mid"), enc.mid, 1, 1, 0),
    }
}

/// Context tokens for the image-conditioning ablation arm: the target-pose
/// latent average-pooled 4×4 per channel, one token per pooled cell.
pub fn image_condition_tokens<S: Scalar>(g: &mut Graph<S>, latent: Var) -> Var {
    let sh = g.val(latent).shape().to_vec();
    assert_eq!(sh.len(), 3);
    let c = sh[0];
    assert!(sh[1] % 4 == 0 && sh[2] % 4 == 0, "spatial dims must pool by 4");
    let cols = g.im2col(latent, 4, 4, 0);
    let mut avg = ArrayD::<S>::zeros(IxDyn(&[c * 16, c]));
    for ch in 0..c {
        for j in 0..16 {
            avg[[ch * 16 + j, ch]] = S::from_f64(1.0 / 16.0);
        }
    }
    let a = g.leaf(avg);
    g.matmul(cols, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aging::AgingBundle;
    use crate::unet::unet_forward;

    fn tiny_cfg() -> UNetConfig {
        UNetConfig { base_width: 8, ..Default::default() }
    }

    fn setup() -> (ParamStore<f64>, UNetConfig, ViewBundle) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(31);
        let base = tiny_cfg();
        AgingBundle::init(&mut store, &mut rng, &base);
        let vb = ViewBundle::init(&mut store, &mut rng, &base);
        (store, base, vb)
    }

    #[test]
    fn angle_features_roundtrip() {
        for az in [-3.0, -1.5, -0.6, 0.0, 0.7, 2.9] {
            for po in [-1.5, -0.4, 0.0, 0.3, 1.5] {
                let p = Pose::new(az, po);
                let back = angle_decode(&angle_features(&p));
                assert!((back.azimuth - az).abs() <= 1e-9, "azimuth {az}");
                assert!((back.polar - po).abs() <= 1e-9, "polar {po}");
            }
        }
        let mut g = Graph::<f64>::new();
        let tok = angle_token(&mut g, &Pose::new(0.5, -0.2));
        assert_eq!(g.val(tok).shape(), &[1, 4]);
    }

    #[test]
    fn view_model_matches_backbone_at_init_without_context() {
        let (store, base, vb) = setup();
        let z0 = normal_array::<f64>(&mut seeded(7), &[4, 16, 16], 0.0, 1.0);
        let src0 = normal_array::<f64>(&mut seeded(8), &[4, 16, 16], 0.0, 1.0);
        let opts = ForwardOpts { t_frac: 0.6, ..Default::default() };

        let mut g = Graph::<f64>::new();
        let mut b = Binding::new();
        let z = g.leaf(z0.clone());
        let run_base = unet_forward(&mut g, &mut b, &store, "base", &base, &[z], &opts);
        let want = g.val(run_base.eps[0]).clone();

        let mut g = Graph::<f64>::new();
        let mut b = Binding::new();
        let z = g.leaf(z0);
        let src = g.leaf(src0);
        let x = g.concat(0, &[z, src]);
        let run_view = unet_forward(&mut g, &mut b, &store, "view", &vb.view, &[x], &opts);
        let diff = (g.val(run_view.eps[0]) - &want).mapv(f64::abs);
        let worst = diff.iter().cloned().fold(0.0, f64::max);
        assert!(worst <= 1e-12, "max deviation {worst}");
    }

    #[test]
    fn angle_token_perturbs_the_view_model() {
        let (store, _, vb) = setup();
        let mut g = Graph::<f64>::new();
        let mut b = Binding::new();
        let z = g.leaf(normal_array(&mut seeded(9), &[4, 16, 16], 0.0, 1.0));
        let src = g.leaf(normal_array(&mut seeded(10), &[4, 16, 16], 0.0, 1.0));
        let frontal = view_eps(&mut g, &mut b, &store, &vb.view, z, src, 0.5, &Pose::frontal());
        let turned =
            view_eps(&mut g, &mut b, &store, &vb.view, z, src, 0.5, &Pose::new(0.4, -0.2));
        let diff = (g.val(turned) - g.val(frontal)).mapv(f64::abs);
        let worst = diff.iter().cloned().fold(0.0, f64::max);
        assert!(worst > 1e-9, "different angles should change the prediction");
    }

    #[test]
    fn view_pairs_are_deterministic_and_inside_the_box() {
        let world = World::<f64>::toy(77);
        let pairs = make_view_pairs(&world, 3, 2, 123);
        let again = make_view_pairs(&world, 3, 2, 123);
        assert_eq!(pairs.len(), 6);
        for (p, q) in pairs.iter().zip(again.iter()) {
            assert_eq!(p.source_latent, q.source_latent);
            assert_eq!(p.target_latent, q.target_latent);
            assert_eq!(p.pose.azimuth, q.pose.azimuth);
            assert_eq!(p.pose.polar, q.pose.polar);
        }
        for p in &pairs {
            assert!(p.pose.azimuth.abs() <= POSE_RANGE_AZ);
            assert!(p.pose.polar.abs() <= POSE_RANGE_PO);
            assert_eq!(p.source_latent.shape(), &[4, 16, 16]);
            assert_eq!(p.target_latent.shape(), &[4, 16, 16]);
        }
        // Same identity, different pose: source and target latents differ.
        assert_ne!(pairs[0].source_latent, pairs[0].target_latent);
        // Different identities get different sources.
        assert_ne!(pairs[0].source_latent, pairs[2].source_latent);
    }

    #[test]
    fn finetuning_reduces_the_probe_loss() {
        let (mut store, _, vb) = setup();
        let world = World::<f64>::toy(42);
        let sched = NoiseSchedule::default();
        let pairs = make_view_pairs(&world, 3, 2, 5);
        let probes = [120, 480, 900];
        let before = eval_view_loss(&store, &vb.view, &sched, &pairs, &probes, 99);
        let log = finetune_view_model(&mut store, &vb.view, &sched, &pairs, 150, 1e-3, 17);
        let after = eval_view_loss(&store, &vb.view, &sched, &pairs, &probes, 99);
        assert_eq!(log.len(), 150);
        assert!(log.iter().all(|l| l.is_finite()));
        assert!(
            after < before,
            "probe loss should drop: before {before:.4}, after {after:.4}"
        );
    }

    #[test]
    fn controller_is_grafted_from_the_view_encoder() {
        let (mut store, base, _) = setup();
        let mut rng = seeded(55);
        attach_controller(&mut store, &mut rng, &base);
        // Encoder weights match the view model's.
        for name in ["d1.res.conv1.w", "down1.w", "d2.sa.wq", "mid.ca.wk", "conv_in.b"] {
            assert_eq!(
                store.get(&format!("ctrl.branch.{name}")),
                store.get(&format!("view.{name}")),
                "{name}"
            );
        }
        // The input convolution keeps the first four channels' rows.
        let view_w = store.get("view.conv_in.w");
        let branch_w = store.get("ctrl.branch.conv_in.w");
        assert_eq!(branch_w.shape(), &[36, 8]);
        for r in 0..36 {
            for c in 0..8 {
                assert_eq!(branch_w[[r, c]], view_w[[r, c]]);
            }
        }
        // Projections are zero.
        for name in ["hi", "lo", "mid"] {
            assert!(store.get(&format!("ctrl.proj.{name}.w")).iter().all(|&v| v == 0.0));
            assert!(store.get(&format!("ctrl.proj.{name}.b")).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn controller_output_is_exactly_zero_at_attachment() {
        let (mut store, base, _) = setup();
        let mut rng = seeded(56);
        attach_controller(&mut store, &mut rng, &base);
        let mut g = Graph::<f64>::new();
        let mut b = Binding::new();
        let cond = g.leaf(normal_array(&mut seeded(57), &[4, 16, 16], 0.0, 1.0));
        let sig =
            controller_signals(&mut g, &mut b, &store, &base, cond, 0.4, &Pose::new(0.3, 0.1));
        assert_eq!(g.val(sig.skip_hi).shape(), &[8, 16, 16]);
        assert_eq!(g.val(sig.skip_lo).shape(), &[16, 8, 8]);
        assert_eq!(g.val(sig.mid).shape(), &[16, 4, 4]);
        for v in [sig.skip_hi, sig.skip_lo, sig.mid] {
            assert!(g.val(v).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn image_tokens_match_a_hand_pooling() {
        let mut g = Graph::<f64>::new();
        let data = normal_array::<f64>(&mut seeded(60), &[4, 16, 16], 0.0, 1.0);
        let latent = g.leaf(data.clone());
        let tok = image_condition_tokens(&mut g, latent);
        assert_eq!(g.val(tok).shape(), &[16, 4]);
        for ch in 0..4 {
            for by in 0..4 {
                for bx in 0..4 {
                    let mut sum = 0.0;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            sum += data[[ch, by * 4 + dy, bx * 4 + dx]];
                        }
                    }
                    let want = sum / 16.0;
                    let got = g.val(tok)[[by * 4 + bx, ch]];
                    assert!((got - want).abs() <= 1e-12, "cell ({ch},{by},{bx})");
                }
            }
        }
    }
}
