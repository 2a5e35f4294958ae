//! The denoising UNet: 2 down blocks, 1 mid block, 2 up blocks on a
//! `[C, 16, 16]` latent, base width 32, channel doubling after the first
//! downsample.
//!
//! Every block carries a residual convolution, a self-attention site, and a
//! cross-attention site (10 attention sites total; 5 of them self-attention).
//! Timestep conditioning is a sinusoidal embedding mapped into each residual
//! block by a per-block linear. Cross-attention context tokens have a small
//! fixed width (`ctx_dim`); the all-zero null token makes every
//! cross-attention site contribute exactly zero, so an unconditioned pass is
//! identical to not having the sites at all.
//!
//! Hooks used by the surrounding stages:
//! - self-attention sites can capture their input tokens (reference states)
//!   and can extend K/V with injected reference tokens;
//! - a controller can add signals to the mid output and the two skips;
//! - frame-axis attention (parameters under `temporal.`) can be spliced in
//!   after every attention site.
//!
//! All parameters of one model live under a single name prefix (`base.`,
//! `aging.`, `view.`, `ctrl.branch.`), which is what stage freezing and
//! checksum audits key on.

use crate::nn::{
    attend, attention_qkv, conv2d, group_norm, init_groupnorm, init_linear, linear,
    sinusoidal_embedding, Binding,
};
use crate::temporal::attend_frames;
use ageview_autograd::store::{normal_array, SeedRng};
use ageview_autograd::{Graph, ParamStore, Scalar, Var};

pub const GN_GROUPS: usize = 8;
pub const GN_EPS: f64 = 1e-5;
/// Self-attention sites, in forward order.
pub const SA_SITES: usize = 5;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Cross-attention context token width.
    pub ctx_dim: usize,
    /// Sinusoidal timestep embedding width (even).
    pub temb_dim: usize,
    /// Give injected reference tokens their own K/V projections instead of
    /// sharing the self-attention ones.
    pub separate_ref_kv: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 4,
            out_channels: 4,
            base_width: 32,
            ctx_dim: 4,
            temb_dim: 32,
            separate_ref_kv: false,
        }
    }
}

impl UNetConfig {
    pub fn width2(&self) -> usize {
        2 * self.base_width
    }
}

/// (site name, channel width) of the 10 attention sites, forward order.
/// Temporal parameters are keyed `temporal.<site>`.
pub fn site_widths(cfg: &UNetConfig) -> Vec<(String, usize)> {
    let (w1, w2) = (cfg.base_width, cfg.width2());
    [
        ("d1.sa", w1),
        ("d1.ca", w1),
        ("d2.sa", w2),
        ("d2.ca", w2),
        ("mid.sa", w2),
        ("mid.ca", w2),
        ("u1.sa", w2),
        ("u1.ca", w2),
        ("u2.sa", w1),
        ("u2.ca", w1),
    ]
    .into_iter()
    .map(|(s, c)| (s.to_string(), c))
    .collect()
}

fn init_res<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut SeedRng,
    name: &str,
    c_in: usize,
    c_out: usize,
    temb_dim: usize,
) {
    init_groupnorm(store, &format!("{name}.gn1"), c_in);
    let std1 = 1.0 / ((c_in * 9) as f64).sqrt();
    store.insert(&format!("{name}.conv1.w"), normal_array(rng, &[c_in * 9, c_out], 0.0, std1));
    store.insert(&format!("{name}.conv1.b"), ageview_autograd::store::zeros_array(&[c_out]));
    init_linear(store, rng, &format!("{name}.temb"), temb_dim, c_out, 1.0 / (temb_dim as f64).sqrt());
    init_groupnorm(store, &format!("{name}.gn2"), c_out);
    let std2 = 1.0 / ((c_out * 9) as f64).sqrt();
    store.insert(&format!("{name}.conv2.w"), normal_array(rng, &[c_out * 9, c_out], 0.0, std2));
    store.insert(&format!("{name}.conv2.b"), ageview_autograd::store::zeros_array(&[c_out]));
    let stds = 1.0 / (c_in as f64).sqrt();
    store.insert(&format!("{name}.skip.w"), normal_array(rng, &[c_in, c_out], 0.0, stds));
    store.insert(&format!("{name}.skip.b"), ageview_autograd::store::zeros_array(&[c_out]));
}

fn init_attn<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut SeedRng,
    name: &str,
    c: usize,
    c_kv: usize,
) {
    let std = 1.0 / (c as f64).sqrt();
    let std_kv = 1.0 / (c_kv as f64).sqrt();
    store.insert(&format!("{name}.wq"), normal_array(rng, &[c, c], 0.0, std));
    store.insert(&format!("{name}.wk"), normal_array(rng, &[c_kv, c], 0.0, std_kv));
    store.insert(&format!("{name}.wv"), normal_array(rng, &[c_kv, c], 0.0, std_kv));
    store.insert(&format!("{name}.wo"), normal_array(rng, &[c, c], 0.0, std));
}

fn init_block<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut SeedRng,
    name: &str,
    c_in: usize,
    c_out: usize,
    cfg: &UNetConfig,
) {
    init_res(store, rng, &format!("{name}.res"), c_in, c_out, cfg.temb_dim);
    init_groupnorm(store, &format!("{name}.sa.gn"), c_out);
    init_attn(store, rng, &format!("{name}.sa"), c_out, c_out);
    if cfg.separate_ref_kv {
        let std = 1.0 / (c_out as f64).sqrt();
        store.insert(&format!("{name}.sa.wk_ref"), normal_array(rng, &[c_out, c_out], 0.0, std));
        store.insert(&format!("{name}.sa.wv_ref"), normal_array(rng, &[c_out, c_out], 0.0, std));
    }
    init_groupnorm(store, &format!("{name}.ca.gn"), c_out);
    init_attn(store, rng, &format!("{name}.ca"), c_out, cfg.ctx_dim);
}

/// Encoder parameters: input conv, both down blocks with their
/// downsamplers, and the mid block.
pub fn init_unet_encoder<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut SeedRng,
    prefix: &str,
    cfg: &UNetConfig,
) {
    let (w1, w2) = (cfg.base_width, cfg.width2());
    let std_in = 1.0 / ((cfg.in_channels * 9) as f64).sqrt();
    store.insert(
        &format!("{prefix}.conv_in.w"),
        normal_array(rng, &[cfg.in_channels * 9, w1], 0.0, std_in),
    );
    store.insert(&format!("{prefix}.conv_in.b"), ageview_autograd::store::zeros_array(&[w1]));
    init_block(store, rng, &format!("{prefix}.d1"), w1, w1, cfg);
    let std_d1 = 1.0 / ((w1 * 9) as f64).sqrt();
    store.insert(&format!("{prefix}.down1.w"), normal_array(rng, &[w1 * 9, w2], 0.0, std_d1));
    store.insert(&format!("{prefix}.down1.b"), ageview_autograd::store::zeros_array(&[w2]));
    init_block(store, rng, &format!("{prefix}.d2"), w2, w2, cfg);
    let std_d2 = 1.0 / ((w2 * 9) as f64).sqrt();
    store.insert(&format!("{prefix}.down2.w"), normal_array(rng, &[w2 * 9, w2], 0.0, std_d2));
    store.insert(&format!("{prefix}.down2.b"), ageview_autograd::store::zeros_array(&[w2]));
    init_block(store, rng, &format!("{prefix}.mid"), w2, w2, cfg);
}

/// Full UNet parameters under `prefix.`.
pub fn init_unet<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut SeedRng,
    prefix: &str,
    cfg: &UNetConfig,
) {
    init_unet_encoder(store, rng, prefix, cfg);
    let (w1, w2) = (cfg.base_width, cfg.width2());
    init_block(store, rng, &format!("{prefix}.u1"), w2 + w2, w2, cfg);
    init_block(store, rng, &format!("{prefix}.u2"), w2 + w1, w1, cfg);
    init_groupnorm(store, &format!("{prefix}.out.gn"), w1);
    let std_out = 1.0 / ((w1 * 9) as f64).sqrt();
    store.insert(
        &format!("{prefix}.out.conv.w"),
        normal_array(rng, &[w1 * 9, cfg.out_channels], 0.0, std_out),
    );
    store.insert(
        &format!("{prefix}.out.conv.b"),
        ageview_autograd::store::zeros_array(&[cfg.out_channels]),
    );
}

/// Copy every parameter under `src_prefix.` to the same name under
/// `dst_prefix.` (destination entries must already exist with equal shapes).
pub fn copy_params_with_prefix<S: Scalar>(
    store: &mut ParamStore<S>,
    src_prefix: &str,
    dst_prefix: &str,
) -> Vec<String> {
    let src_dot = format!("{src_prefix}.");
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(&src_dot))
        .map(|n| n.to_string())
        .collect();
    assert!(!names.is_empty(), "no parameters under prefix {src_prefix:?}");
    let mut skipped = Vec::new();
    for n in &names {
        let target = format!("{dst_prefix}.{}", &n[src_dot.len()..]);
        if !store.contains(&target) {
            skipped.push(target);
            continue;
        }
        let value = store.get(n).clone();
        if store.get(&target).shape() != value.shape() {
            skipped.push(target);
            continue;
        }
        store.get_mut(&target).assign(&value);
    }
    skipped
}

/// Overwrite a widened `[new_c_in·k², c_out]` convolution weight with the
/// rows of a `[old_c_in·k², c_out]` source; rows of the added input channels
/// become zero, so those channels are inert at initialization.
pub fn widen_conv_rows<S: Scalar>(
    store: &mut ParamStore<S>,
    src_name: &str,
    dst_name: &str,
    k: usize,
) {
    let src = store.get(src_name).clone();
    let (src_rows, c_out) = (src.shape()[0], src.shape()[1]);
    assert_eq!(src_rows % (k * k), 0);
    let dst_rows = store.get(dst_name).shape()[0];
    assert!(dst_rows >= src_rows, "destination must be at least as wide");
    let mut wide = ndarray::ArrayD::<S>::zeros(ndarray::IxDyn(&[dst_rows, c_out]));
    for r in 0..src_rows {
        for c in 0..c_out {
            wide[[r, c]] = src[[r, c]];
        }
    }
    store.get_mut(dst_name).assign(&wide);
}

/// Overwrite a narrowed convolution weight with the leading input-channel
/// rows of a wider source (keeps channels `0..keep_c_in`).
pub fn slice_conv_rows<S: Scalar>(
    store: &mut ParamStore<S>,
    src_name: &str,
    dst_name: &str,
    keep_c_in: usize,
    k: usize,
) {
    let src = store.get(src_name).clone();
    let c_out = src.shape()[1];
    let keep_rows = keep_c_in * k * k;
    assert!(src.shape()[0] >= keep_rows);
    let mut narrow = ndarray::ArrayD::<S>::zeros(ndarray::IxDyn(&[keep_rows, c_out]));
    for r in 0..keep_rows {
        for c in 0..c_out {
            narrow[[r, c]] = src[[r, c]];
        }
    }
    store.get_mut(dst_name).assign(&narrow);
}

/// Controller additions to the decoder path of a frozen model.
#[derive(Debug, Clone, Copy)]
pub struct ControlSignal {
    /// Added to the first skip (base width, full resolution).
    pub skip_hi: Var,
    /// Added to the second skip (double width, half resolution).
    pub skip_lo: Var,
    /// Added to the mid-block output.
    pub mid: Var,
}

#[derive(Clone, Copy)]
pub struct ForwardOpts<'a> {
    /// Timestep as a fraction t/T of the training schedule.
    pub t_frac: f64,
    /// Per-frame context token matrices `[n_tok, ctx_dim]`; `None` is the
    /// null token (cross-attention contributes exactly zero).
    pub ctx: Option<&'a [Var]>,
    /// Capture self-attention input tokens (the reference states).
    pub capture_sa: bool,
    /// Reference tokens per self-attention site, shared by all frames.
    pub ref_tokens: Option<&'a [Var]>,
    /// Per-frame controller additions.
    pub control: Option<&'a [ControlSignal]>,
    /// Splice frame attention (parameters under `temporal.`) after every
    /// attention site.
    pub temporal: bool,
    /// Add the sinusoidal frame-index code inside temporal attention.
    pub frame_encoding: bool,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        ForwardOpts {
            t_frac: 0.0,
            ctx: None,
            capture_sa: false,
            ref_tokens: None,
            control: None,
            temporal: false,
            frame_encoding: false,
        }
    }
}

pub struct UNetRun {
    /// Per-frame noise predictions `[out_channels, H, W]`.
    pub eps: Vec<Var>,
    /// Captured reference states: `sa_tokens[frame][site]` of shape
    /// `[H·W, C]` (empty unless requested).
    pub sa_tokens: Vec<Vec<Var>>,
}

fn to_tokens<S: Scalar>(g: &mut Graph<S>, x: Var) -> (Var, usize, usize, usize) {
    let sh = g.val(x).shape().to_vec();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let p = g.permute(x, &[1, 2, 0]);
    (g.reshape(p, &[h * w, c]), c, h, w)
}

fn from_tokens<S: Scalar>(g: &mut Graph<S>, t: Var, c: usize, h: usize, w: usize) -> Var {
    let r = g.reshape(t, &[h, w, c]);
    g.permute(r, &[2, 0, 1])
}

struct Ctx<'a, 'b, S: Scalar> {
    b: &'a mut Binding<S>,
    store: &'a ParamStore<S>,
    prefix: &'a str,
    cfg: &'a UNetConfig,
    opts: &'a ForwardOpts<'b>,
    temb: Var,
    null_ctx: Var,
    site_index: usize,
    sa_index: usize,
    captured: Vec<Vec<Var>>,
}

impl<S: Scalar> Ctx<'_, '_, S> {
    fn res(&mut self, g: &mut Graph<S>, block: &str, frames: &[Var]) -> Vec<Var> {
        let name = format!("{}.{block}.res", self.prefix);
        frames
            .iter()
            .map(|&x| {
                let h = group_norm(g, self.b, self.store, &format!("{name}.gn1"), x, GN_GROUPS, GN_EPS);
                let h = g.silu(h);
                let h = conv2d(g, self.b, self.store, &format!("{name}.conv1"), h, 3, 1, 1);
                let t = linear(g, self.b, self.store, &format!("{name}.temb"), self.temb); // [1, c]
                let c_out = g.val(t).shape()[1];
                let t = g.reshape(t, &[c_out, 1, 1]);
                let h = g.add(h, t);
                let h = group_norm(g, self.b, self.store, &format!("{name}.gn2"), h, GN_GROUPS, GN_EPS);
                let h = g.silu(h);
                let h = conv2d(g, self.b, self.store, &format!("{name}.conv2"), h, 3, 1, 1);
                let s = conv2d(g, self.b, self.store, &format!("{name}.skip"), x, 1, 1, 0);
                g.add(h, s)
            })
            .collect()
    }

    fn maybe_temporal(&mut self, g: &mut Graph<S>, site: &str, frames: Vec<Var>) -> Vec<Var> {
        self.site_index += 1;
        if !self.opts.temporal || frames.is_empty() {
            return frames;
        }
        attend_frames(
            g,
            self.b,
            self.store,
            &format!("temporal.{site}"),
            &frames,
            self.opts.frame_encoding,
        )
    }

    fn sa(&mut self, g: &mut Graph<S>, block: &str, frames: Vec<Var>) -> Vec<Var> {
        let name = format!("{}.{block}.sa", self.prefix);
        let site = self.sa_index;
        let out: Vec<Var> = frames
            .iter()
            .enumerate()
            .map(|(fi, &x)| {
                let n = group_norm(g, self.b, self.store, &format!("{name}.gn"), x, GN_GROUPS, GN_EPS);
                let (tok, c, h, w) = to_tokens(g, n);
                if self.opts.capture_sa {
                    self.captured[fi].push(tok);
                }
                let a = match self.opts.ref_tokens {
                    None => attend(g, self.b, self.store, &name, tok, tok),
                    Some(refs) => {
                        let r = refs[site];
                        if self.cfg.separate_ref_kv {
                            // reference tokens get their own K/V maps; own
                            // tokens keep the shared ones
                            let wq = self.b.get(g, self.store, &format!("{name}.wq"));
                            let wk = self.b.get(g, self.store, &format!("{name}.wk"));
                            let wv = self.b.get(g, self.store, &format!("{name}.wv"));
                            let wo = self.b.get(g, self.store, &format!("{name}.wo"));
                            let wk_r = self.b.get(g, self.store, &format!("{name}.wk_ref"));
                            let wv_r = self.b.get(g, self.store, &format!("{name}.wv_ref"));
                            let q = g.matmul(tok, wq);
                            let k_own = g.matmul(tok, wk);
                            let k_ref = g.matmul(r, wk_r);
                            let k = g.concat(0, &[k_own, k_ref]);
                            let v_own = g.matmul(tok, wv);
                            let v_ref = g.matmul(r, wv_r);
                            let v = g.concat(0, &[v_own, v_ref]);
                            let mixed = attention_qkv(g, q, k, v);
                            g.matmul(mixed, wo)
                        } else {
                            let kv = g.concat(0, &[tok, r]);
                            attend(g, self.b, self.store, &name, tok, kv)
                        }
                    }
                };
                let a = from_tokens(g, a, c, h, w);
                g.add(x, a)
            })
            .collect();
        self.sa_index += 1;
        self.maybe_temporal(g, &format!("{block}.sa"), out)
    }

    fn ca(&mut self, g: &mut Graph<S>, block: &str, frames: Vec<Var>) -> Vec<Var> {
        let name = format!("{}.{block}.ca", self.prefix);
        let out: Vec<Var> = frames
            .iter()
            .enumerate()
            .map(|(fi, &x)| {
                let n = group_norm(g, self.b, self.store, &format!("{name}.gn"), x, GN_GROUPS, GN_EPS);
                let (tok, c, h, w) = to_tokens(g, n);
                let ctx = match self.opts.ctx {
                    Some(list) => list[fi],
                    None => self.null_ctx,
                };
                let a = attend(g, self.b, self.store, &name, tok, ctx);
                let a = from_tokens(g, a, c, h, w);
                g.add(x, a)
            })
            .collect();
        self.maybe_temporal(g, &format!("{block}.ca"), out)
    }
}

/// Encoder activations of one frame.
pub struct EncoderRun {
    /// After the first block, full resolution, base width.
    pub hi: Var,
    /// After the second block, half resolution, double width.
    pub lo: Var,
    /// Mid-block output, quarter resolution, double width.
    pub mid: Var,
}

fn encoder_pass<S: Scalar>(
    g: &mut Graph<S>,
    ctx: &mut Ctx<'_, '_, S>,
    inputs: &[Var],
) -> (Vec<Var>, Vec<Var>, Vec<Var>) {
    let p = ctx.prefix.to_string();
    let mut hs: Vec<Var> = inputs
        .iter()
        .map(|&x| conv2d(g, ctx.b, ctx.store, &format!("{p}.conv_in"), x, 3, 1, 1))
        .collect();
    hs = ctx.res(g, "d1", &hs);
    hs = ctx.sa(g, "d1", hs);
    hs = ctx.ca(g, "d1", hs);
    let skips_hi = hs.clone();
    hs = hs
        .iter()
        .map(|&x| conv2d(g, ctx.b, ctx.store, &format!("{p}.down1"), x, 3, 2, 1))
        .collect();
    hs = ctx.res(g, "d2", &hs);
    hs = ctx.sa(g, "d2", hs);
    hs = ctx.ca(g, "d2", hs);
    let skips_lo = hs.clone();
    hs = hs
        .iter()
        .map(|&x| conv2d(g, ctx.b, ctx.store, &format!("{p}.down2"), x, 3, 2, 1))
        .collect();
    hs = ctx.res(g, "mid", &hs);
    hs = ctx.sa(g, "mid", hs);
    hs = ctx.ca(g, "mid", hs);
    (skips_hi, skips_lo, hs)
}

/// Full denoiser forward over a frame group (same timestep for the group).
pub fn unet_forward<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binding<S>,
    store: &ParamStore<S>,
    prefix: &str,
    cfg: &UNetConfig,
    inputs: &[Var],
    opts: &ForwardOpts,
) -> UNetRun {
    assert!(!inputs.is_empty());
    if let Some(c) = opts.ctx {
        assert_eq!(c.len(), inputs.len(), "one ctx token matrix per frame");
    }
    if let Some(c) = opts.control {
        assert_eq!(c.len(), inputs.len(), "one control signal per frame");
    }
    if let Some(r) = opts.ref_tokens {
        assert_eq!(r.len(), SA_SITES, "one reference state per self-attention site");
    }
    let temb = g.leaf(sinusoidal_embedding(opts.t_frac, cfg.temb_dim));
    let null_ctx = g.leaf(ageview_autograd::store::zeros_array(&[1, cfg.ctx_dim]));
    let mut ctx = Ctx {
        b,
        store,
        prefix,
        cfg,
        opts,
        temb,
        null_ctx,
        site_index: 0,
        sa_index: 0,
        captured: vec![Vec::new(); inputs.len()],
    };
    let (skips_hi, skips_lo, mid) = encoder_pass(g, &mut ctx, inputs);

    let p = prefix.to_string();
    let mut hs = mid;
    if let Some(ctrl) = opts.control {
        hs = hs.iter().zip(ctrl.iter()).map(|(&h, c)| g.add(h, c.mid)).collect();
    }
    hs = hs.iter().map(|&x| g.upsample_nearest2(x)).collect();
    let lo: Vec<Var> = match opts.control {
        Some(ctrl) => {
            skips_lo.iter().zip(ctrl.iter()).map(|(&s, c)| g.add(s, c.skip_lo)).collect()
        }
        None => skips_lo,
    };
    hs = hs.iter().zip(lo.iter()).map(|(&h, &s)| g.concat(0, &[h, s])).collect();
    hs = ctx.res(g, "u1", &hs);
    hs = ctx.sa(g, "u1", hs);
    hs = ctx.ca(g, "u1", hs);
    hs = hs.iter().map(|&x| g.upsample_nearest2(x)).collect();
    let hi: Vec<Var> = match opts.control {
        Some(ctrl) => {
            skips_hi.iter().zip(ctrl.iter()).map(|(&s, c)| g.add(s, c.skip_hi)).collect()
        }
        None => skips_hi,
    };
    hs = hs.iter().zip(hi.iter()).map(|(&h, &s)| g.concat(0, &[h, s])).collect();
    hs = ctx.res(g, "u2", &hs);
    hs = ctx.sa(g, "u2", hs);
    hs = ctx.ca(g, "u2", hs);
    let eps = hs
        .iter()
        .map(|&x| {
            let h = group_norm(g, ctx.b, store, &format!("{p}.out.gn"), x, GN_GROUPS, GN_EPS);
            let h = g.silu(h);
            conv2d(g, ctx.b, store, &format!("{p}.out.conv"), h, 3, 1, 1)
        })
        .collect();
    debug_assert_eq!(ctx.site_index, 10, "ten attention sites per pass");
    UNetRun { eps, sa_tokens: ctx.captured }
}

/// Encoder-only forward of a single frame (the controller branch).
pub fn unet_encoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binding<S>,
    store: &ParamStore<S>,
    prefix: &str,
    cfg: &UNetConfig,
    input: Var,
    t_frac: f64,
    ctx_tokens: Option<Var>,
) -> EncoderRun {
    let temb = g.leaf(sinusoidal_embedding(t_frac, cfg.temb_dim));
    let null_ctx = g.leaf(ageview_autograd::store::zeros_array(&[1, cfg.ctx_dim]));
    let ctx_list = ctx_tokens.map(|c| vec![c]);
    let opts = ForwardOpts {
        t_frac,
        ctx: ctx_list.as_deref(),
        ..ForwardOpts::default()
    };
    let mut ctx = Ctx {
        b,
        store,
        prefix,
        cfg,
        opts: &opts,
        temb,
        null_ctx,
        site_index: 0,
        sa_index: 0,
        captured: vec![Vec::new()],
    };
    let (hi, lo, mid) = encoder_pass(g, &mut ctx, &[input]);
    EncoderRun { hi: hi[0], lo: lo[0], mid: mid[0] }
}
