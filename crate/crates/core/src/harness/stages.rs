//! Diffusion-side stage trainers. Each one draws every random quantity from
//! its own seeded stream, builds a fresh tape per step, and only ever feeds
//! gradients for its stage's parameter family to the optimizer; the harness
//! checksums everything else around the call.

use crate::aging::{aged_eps, extract_reference_states, AgingBundle, COND_DROPOUT};
use crate::dataset::{Dataset, TrainError, DIVERGENCE_LIMIT};
use crate::diffusion::NoiseSchedule;
use crate::nn::Binding;
use crate::unet::{ControlSignal, ForwardOpts, UNetConfig};
use crate::viewpoint::{
    controller_signals, controller_signals_with, image_condition_tokens, sample_training_pose,
};
use crate::world::World;
use ageview_autograd::store::{normal_array, seeded, uniform_f64};
use ageview_autograd::{Adam, AdamConfig, Graph, ParamStore, Scalar, Var};
use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct DiffStageOpts {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Latents the trainers reuse every step: one per record and one per
/// identity's frontal source render.
struct EncodedDataset<S: Scalar> {
    records: Vec<ArrayD<S>>,
    sources: Vec<ArrayD<S>>,
}

fn encode_dataset<S: Scalar>(world: &World<S>, ds: &Dataset<S>) -> EncodedDataset<S> {
    EncodedDataset {
        records: ds.images.iter().map(|im| world.encode_array(im)).collect(),
        sources: ds.source_images.iter().map(|im| world.encode_array(im)).collect(),
    }
}

fn check_loss(v: f64, step: usize) -> Result<(), TrainError> {
    if !v.is_finite() {
        return Err(TrainError::NonFinite { step });
    }
    if v > DIVERGENCE_LIMIT {
        return Err(TrainError::Diverged { step, value: v, limit: DIVERGENCE_LIMIT });
    }
    Ok(())
}

/// Season the backbone (`base.`) as a plain unconditional denoiser before it
/// freezes — the desk-scale stand-in for arriving with pretrained weights.
///
/// Each step renders a fresh identity at a random training pose and a random
/// age, encodes it, and takes one denoising MSE step. No conditioning of any
/// kind: the backbone must stay exactly the unconditional guidance branch.
pub fn pretrain_base<S: Scalar>(
    store: &mut ParamStore<S>,
    world: &World<S>,
    base: &UNetConfig,
    sched: &NoiseSchedule,
    opts: &DiffStageOpts,
) -> Result<Vec<f64>, TrainError> {
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr));
    let mut rng = seeded(opts.seed);
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let identity_seed: u64 = rand::Rng::gen(&mut rng);
        let code = world.sample_latent(identity_seed);
        let age = uniform_f64(&mut rng, 0.0, 100.0);
        let styles = world.generator.latent_with_age(&code.styles, age);
        let pose = sample_training_pose(&mut rng);
        let image = world.render_array(&styles, pose)?;
        let latent = world.encode_array(&image);
        let t = sched.sample_timestep(&mut rng);
        let noise = normal_array::<S>(&mut rng, latent.shape(), 0.0, 1.0);

        let mut g = Graph::new();
        let mut b = Binding::new();
        let z0 = g.leaf(latent);
        let eps = g.leaf(noise);
        let z_t = sched.add_noise(&mut g, z0, eps, t);
        let t_frac = t as f64 / sched.steps as f64;
        let fopts = ForwardOpts { t_frac, ..Default::default() };
        let eps_hat = aged_eps(&mut g, &mut b, store, base, &[z_t], &fopts)[0];
        let d = g.sub(eps_hat, eps);
        let sq = g.square(d);
        let loss = g.mean_all(sq);
        let v = g.scalar_val(loss).as_f64();
        check_loss(v, step)?;
        let grads = g.backward(loss);
        let gm = b.grads(&grads, |n| n.starts_with("base."));
        adam.step(store, &gm);
        log.push(v);
    }
    Ok(log)
}

/// Train the reference-conditioned aging denoiser (`aging.`).
///
/// Per step: one training record's latent is noised, the frozen backbone
/// predicts the noise with the replica's attention states injected, and the
/// MSE gradient flows back through the injected states into the replica.
/// With probability [`COND_DROPOUT`] the states are withheld, which trains
/// the unconditional branch used by guidance.
pub fn train_aging<S: Scalar>(
    store: &mut ParamStore<S>,
    world: &World<S>,
    bundle: &AgingBundle,
    sched: &NoiseSchedule,
    ds: &Dataset<S>,
    opts: &DiffStageOpts,
) -> Result<Vec<f64>, TrainError> {
    let train = ds.train_record_indices();
    assert!(!train.is_empty(), "dataset has no training records");
    let enc = encode_dataset(world, ds);
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr));
    let mut rng = seeded(opts.seed);
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let rec_i = train[(uniform_f64(&mut rng, 0.0, train.len() as f64) as usize)
            .min(train.len() - 1)];
        let rec = &ds.records[rec_i];
        let t = sched.sample_timestep(&mut rng);
        let noise = normal_array::<S>(&mut rng, enc.records[rec_i].shape(), 0.0, 1.0);
        let drop_cond = uniform_f64(&mut rng, 0.0, 1.0) < COND_DROPOUT;

        let mut g = Graph::new();
        let mut b = Binding::new();
        let z0 = g.leaf(enc.records[rec_i].clone());
        let eps = g.leaf(noise);
        let z_t = sched.add_noise(&mut g, z0, eps, t);
        let t_frac = t as f64 / sched.steps as f64;
        let refs: Option<Vec<Var>> = if drop_cond {
            None
        } else {
            let src = g.leaf(enc.sources[rec.identity].clone());
            Some(extract_reference_states(
                &mut g,
                &mut b,
                store,
                &bundle.aging,
                src,
                rec.target_age as f64,
            ))
        };
        let fopts = ForwardOpts { t_frac, ref_tokens: refs.as_deref(), ..Default::default() };
        let eps_hat = aged_eps(&mut g, &mut b, store, &bundle.base, &[z_t], &fopts)[0];
        let d = g.sub(eps_hat, eps);
        let sq = g.square(d);
        let loss = g.mean_all(sq);
        let v = g.scalar_val(loss).as_f64();
        check_loss(v, step)?;
        let grads = g.backward(loss);
        let gm = b.grads(&grads, |n| n.starts_with("aging."));
        adam.step(store, &gm);
        log.push(v);
    }
    Ok(log)
}

/// Train the viewpoint controller (`ctrl.`).
///
/// The control branch reads the identity's source latent plus a pose token
/// and adds its projected features into the frozen denoiser; only the
/// branch and its zero-initialized projections receive gradient. No
/// conditioning dropout here — the controller is always conditional.
pub fn train_controller<S: Scalar>(
    store: &mut ParamStore<S>,
    world: &World<S>,
    bundle: &AgingBundle,
    sched: &NoiseSchedule,
    ds: &Dataset<S>,
    opts: &DiffStageOpts,
) -> Result<Vec<f64>, TrainError> {
    train_controller_impl(store, world, bundle, sched, ds, opts, false)
}

/// Train the image-conditioning experiment arm (`ctrlrgb.`): identical to
/// [`train_controller`] except the branch's conditioning token is the
/// pooled latent of the target-pose render instead of the pose token.
/// Runs outside the stage ledger; the product pipeline never calls it.
pub fn train_rgb_arm<S: Scalar>(
    store: &mut ParamStore<S>,
    world: &World<S>,
    bundle: &AgingBundle,
    sched: &NoiseSchedule,
    ds: &Dataset<S>,
    opts: &DiffStageOpts,
) -> Result<Vec<f64>, TrainError> {
    train_controller_impl(store, world, bundle, sched, ds, opts, true)
}

fn train_controller_impl<S: Scalar>(
    store: &mut ParamStore<S>,
    world: &World<S>,
    bundle: &AgingBundle,
    sched: &NoiseSchedule,
    ds: &Dataset<S>,
    opts: &DiffStageOpts,
    rgb_arm: bool,
) -> Result<Vec<f64>, TrainError> {
    let train = ds.train_record_indices();
    assert!(!train.is_empty(), "dataset has no training records");
    let enc = encode_dataset(world, ds);
    let prefix = if rgb_arm { "ctrlrgb." } else { "ctrl." };
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr));
    let mut rng = seeded(opts.seed);
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let rec_i = train[(uniform_f64(&mut rng, 0.0, train.len() as f64) as usize)
            .min(train.len() - 1)];
        let rec = &ds.records[rec_i];
        let pose = crate::world::Pose::new(rec.azimuth, rec.polar);
        let t = sched.sample_timestep(&mut rng);
        let noise = normal_array::<S>(&mut rng, enc.records[rec_i].shape(), 0.0, 1.0);

        let mut g = Graph::new();
        let mut b = Binding::new();
        let z0 = g.leaf(enc.records[rec_i].clone());
        let eps = g.leaf(noise);
        let z_t = sched.add_noise(&mut g, z0, eps, t);
        let t_frac = t as f64 / sched.steps as f64;
        let src = g.leaf(enc.sources[rec.identity].clone());
        let refs =
            extract_reference_states(&mut g, &mut b, store, &bundle.aging, src, rec.target_age as f64);
        let sig = if rgb_arm {
            let target_latent = g.leaf(enc.records[rec_i].clone());
            let tok = image_condition_tokens(&mut g, target_latent);
            controller_signals_with(
                &mut g,
                &mut b,
                store,
                &bundle.base,
                "ctrlrgb",
                src,
                t_frac,
                tok,
            )
        } else {
            controller_signals(&mut g, &mut b, store, &bundle.base, src, t_frac, &pose)
        };
        let sigs = [sig];
        let fopts = ForwardOpts {
            t_frac,
            ref_tokens: Some(&refs),
            control: Some(&sigs),
            ..Default::default()
        };
        let eps_hat = aged_eps(&mut g, &mut b, store, &bundle.base, &[z_t], &fopts)[0];
        let d = g.sub(eps_hat, eps);
        let sq = g.square(d);
        let loss = g.mean_all(sq);
        let v = g.scalar_val(loss).as_f64();
        check_loss(v, step)?;
        let grads = g.backward(loss);
        let gm = b.grads(&grads, |n| n.starts_with(prefix));
        adam.step(store, &gm);
        log.push(v);
    }
    Ok(log)
}

/// Train frame attention (`temporal.`).
///
/// Per step: the first few views of one (identity, age) frame stack are
/// noised at a shared timestep and denoised jointly, with the controller's
/// per-frame signals and the shared reference states held frozen; only the
/// spliced frame-attention parameters train.
#[allow(clippy::too_many_arguments)]
pub fn train_temporal<S: Scalar>(
    store: &mut ParamStore<S>,
    world: &World<S>,
    bundle: &AgingBundle,
    sched: &NoiseSchedule,
    ds: &Dataset<S>,
    opts: &DiffStageOpts,
    frames: usize,
) -> Result<Vec<f64>, TrainError> {
    assert!(frames >= 1);
    let groups: Vec<_> = ds
        .frame_groups()
        .into_iter()
        .filter(|gr| !ds.identities[gr.identity].val)
        .collect();
    assert!(!groups.is_empty(), "dataset has no training frame stacks");
    let enc = encode_dataset(world, ds);
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr));
    let mut rng = seeded(opts.seed);
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let gr = &groups
            [(uniform_f64(&mut rng, 0.0, groups.len() as f64) as usize).min(groups.len() - 1)];
        let f = frames.min(gr.records.len());
        let t = sched.sample_timestep(&mut rng);
        let t_frac = t as f64 / sched.steps as f64;

        let mut g = Graph::new();
        let mut b = Binding::new();
        let src = g.leaf(enc.sources[gr.identity].clone());
        let refs = extract_reference_states(
            &mut g,
            &mut b,
            store,
            &bundle.aging,
            src,
            gr.target_age as f64,
        );
        let mut zts = Vec::with_capacity(f);
        let mut targets = Vec::with_capacity(f);
        let mut sigs: Vec<ControlSignal> = Vec::with_capacity(f);
        for &rec_i in gr.records.iter().take(f) {
            let rec = &ds.records[rec_i];
            let noise = normal_array::<S>(&mut rng, enc.records[rec_i].shape(), 0.0, 1.0);
            let z0 = g.leaf(enc.records[rec_i].clone());
            let eps = g.leaf(noise);
            zts.push(sched.add_noise(&mut g, z0, eps, t));
            targets.push(eps);
            let pose = crate::world::Pose::new(rec.azimuth, rec.polar);
            sigs.push(controller_signals(&mut g, &mut b, store, &bundle.base, src, t_frac, &pose));
        }
        let fopts = ForwardOpts {
            t_frac,
            ref_tokens: Some(&refs),
            control: Some(&sigs),
            temporal: true,
            frame_encoding: true,
            ..Default::default()
        };
        let eps_hats = aged_eps(&mut g, &mut b, store, &bundle.base, &zts, &fopts);
        let mut per_frame = Vec::with_capacity(f);
        for (eps_hat, eps) in eps_hats.into_iter().zip(&targets) {
            let d = g.sub(eps_hat, *eps);
            let sq = g.square(d);
            per_frame.push(g.mean_all(sq));
        }
        let stacked = g.concat(0, &per_frame);
        let loss = g.mean_all(stacked);
        let v = g.scalar_val(loss).as_f64();
        check_loss(v, step)?;
        let grads = g.backward(loss);
        let gm = b.grads(&grads, |n| n.starts_with("temporal."));
        adam.step(store, &gm);
        log.push(v);
    }
    Ok(log)
}
