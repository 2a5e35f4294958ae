//! Network building blocks on top of the autograd tape: parameter binding,
//! linear/conv/groupnorm layers, and the attention primitive.

use ageview_autograd::store::{normal_array, zeros_array, SeedRng};
use ageview_autograd::{Gradients, Graph, ParamStore, Scalar, Var};
use indexmap::IndexMap;
use ndarray::ArrayD;

/// Per-forward map from parameter name to tape leaf. Binding the same name
/// twice returns the same leaf, so gradients accumulate across uses.
pub struct Binding<S: Scalar> {
    vars: IndexMap<String, Var>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Binding<S> {
    pub fn new() -> Self {
        Binding { vars: IndexMap::new(), _marker: std::marker::PhantomData }
    }

    pub fn get(&mut self, g: &mut Graph<S>, store: &ParamStore<S>, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let v = g.leaf(store.get(name).clone());
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    /// Gradients of every bound parameter whose name passes the filter.
    /// Parameters the loss never reached are skipped.
    pub fn grads(
        &self,
        grads: &Gradients<S>,
        keep: impl Fn(&str) -> bool,
    ) -> IndexMap<String, ArrayD<S>> {
        let mut out = IndexMap::new();
        for (name, var) in &self.vars {
            if !keep(name) {
                continue;
            }
            if let Some(gv) = grads.get(*var) {
                out.insert(name.clone(), gv.clone());
            }
        }
        out
    }
}

impl<S: Scalar> Default for Binding<S> {
    fn default() -> Self {
        Self::new()
    }
}

// ----------------------------------------------------------------------
// initializers
// ----------------------------------------------------------------------

pub fn init_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut SeedRng,
    name: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
) {
    store.insert(&format!("{name}.w"), normal_array(rng, &[d_in, d_out], 0.0, std));
    store.insert(&format!("{name}.b"), zeros_array(&[d_out]));
}

pub fn init_linear_zero<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize) {
    store.insert(&format!("{name}.w"), zeros_array(&[d_in, d_out]));
    store.insert(&format!("{name}.b"), zeros_array(&[d_out]));
}

/// Convolution weight layout: `[c_in*k*k, c_out]`, matching the im2col
/// column order (channel-major, then kernel row, then kernel column).
pub fn init_conv<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut SeedRng,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    std: f64,
) {
    store.insert(&format!("{name}.w"), normal_array(rng, &[c_in * k * k, c_out], 0.0, std));
    store.insert(&format!("{name}.b"), zeros_array(&[c_out]));
}

pub fn init_conv_zero<S: Scalar>(store: &mut ParamStore<S>, name: &str, c_in: usize, c_out: usize, k: usize) {
    store.insert(&format!("{name}.w"), zeros_array(&[c_in * k * k, c_out]));
    store.insert(&format!("{name}.b"), zeros_array(&[c_out]));
}

pub fn init_groupnorm<S: Scalar>(store: &mut ParamStore<S>, name: &str, c: usize) {
    store.insert(&format!("{name}.g"), ArrayD::from_elem(ndarray::IxDyn(&[c, 1, 1]), S::one()));
    store.insert(&format!("{name}.b"), zeros_array(&[c, 1, 1]));
}

// ----------------------------------------------------------------------
// forward helpers
// ----------------------------------------------------------------------

/// `x [n, d_in] -> [n, d_out]`.
pub fn linear<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binding<S>,
    store: &ParamStore<S>,
    name: &str,
    x: Var,
) -> Var {
    let w = b.get(g, store, &format!("{name}.w"));
    let bias = b.get(g, store, &format!("{name}.b"));
    let y = g.matmul(x, w);
    g.add(y, bias)
}

/// `x [c_in, h, w] -> [c_out, oh, ow]`, stride/pad as given, 3x3 or 1x1.
pub fn conv2d<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binding<S>,
    store: &ParamStore<S>,
    name: &str,
    x: Var,
    k: usize,
    stride: usize,
    pad: usize,
) -> Var {
    let (h, w) = {
        let s = g.val(x).shape();
        (s[1], s[2])
    };
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let wt = b.get(g, store, &format!("{name}.w"));
    let bias = b.get(g, store, &format!("{name}.b"));
    let c_out = g.val(wt).shape()[1];
    let cols = g.im2col(x, k, stride, pad);
    let y = g.matmul(cols, wt); // [oh*ow, c_out]
    let y = g.add(y, bias);
    let y = g.permute(y, &[1, 0]);
    g.reshape(y, &[c_out, oh, ow])
}

/// Group normalization over `[c, h, w]` with affine parameters.
pub fn group_norm<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binding<S>,
    store: &ParamStore<S>,
    name: &str,
    x: Var,
    groups: usize,
    eps: f64,
) -> Var {
    let shape = g.val(x).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    let xg = g.reshape(x, &[groups, (c / groups) * h * w]);
    let mu = g.mean_axis_keepdim(xg, 1);
    let centered = g.sub(xg, mu);
    let sq = g.square(centered);
    let var = g.mean_axis_keepdim(sq, 1);
    let var_eps = g.add_scalar(var, eps);
    let std = g.sqrt(var_eps);
    let normed = g.div(centered, std);
    let back = g.reshape(normed, &[c, h, w]);
    let gamma = b.get(g, store, &format!("{name}.g"));
    let beta = b.get(g, store, &format!("{name}.b"));
    let scaled = g.mul(back, gamma);
    g.add(scaled, beta)
}

/// Scaled dot-product attention over token matrices: queries from
/// `x [t, c]`, keys/values from `kv [t_kv, c_kv]`, all four projections
/// under `name`. Softmax over the key axis, scale 1/sqrt(c).
pub fn attend<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binding<S>,
    store: &ParamStore<S>,
    name: &str,
    x: Var,
    kv: Var,
) -> Var {
    let wq = b.get(g, store, &format!("{name}.wq"));
    let wk = b.get(g, store, &format!("{name}.wk"));
    let wv = b.get(g, store, &format!("{name}.wv"));
    let wo = b.get(g, store, &format!("{name}.wo"));
    let d = g.val(wq).shape()[1];
    let q = g.matmul(x, wq);
    let k = g.matmul(kv, wk);
    let v = g.matmul(kv, wv);
    let kt = g.t2(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_last(scores);
    let mixed = g.matmul(weights, v);
    g.matmul(mixed, wo)
}

/// Plain Softmax(Q Kᵀ / sqrt(d)) V on already-projected matrices.
pub fn attention_qkv<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var) -> Var {
    let d = g.val(q).shape()[1];
    assert_eq!(d, g.val(k).shape()[1], "attention inner dim mismatch");
    let kt = g.t2(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_last(scores);
    g.matmul(weights, v)
}

/// Sinusoidal embedding of a fraction in [0, 1]; plain array (no gradient).
pub fn sinusoidal_embedding<S: Scalar>(t_frac: f64, dim: usize) -> ArrayD<S> {
    assert!(dim % 2 == 0, "sinusoidal embedding dim must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out.push(S::from_f64((t_frac * 1000.0 * freq).sin()));
    }
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out.push(S::from_f64((t_frac * 1000.0 * freq).cos()));
    }
    ArrayD::from_shape_vec(ndarray::IxDyn(&[1, dim]), out).unwrap()
}

/// Cosine similarity of two flat vectors; `None` when either norm is
/// below `floor` (caller decides the degenerate policy).
pub fn cosine<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var, floor: f64) -> Option<Var> {
    let na: f64 = g.val(a).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    let nb: f64 = g.val(b).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if na < floor || nb < floor {
        return None;
    }
    let prod = g.mul(a, b);
    let dot = g.sum_all(prod);
    let a2 = g.square(a);
    let sa = g.sum_all(a2);
    let ra = g.sqrt(sa);
    let b2 = g.square(b);
    let sb = g.sum_all(b2);
    let rb = g.sqrt(sb);
    let denom = g.mul(ra, rb);
    Some(g.div(dot, denom))
}
