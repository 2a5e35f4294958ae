//! The autodiff tape: nodes, operations, and the backward pass.

use crate::scalar::Scalar;
use ndarray::{ArrayD, Axis, IxDyn, Slice};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type BackFn<S> = Box<dyn FnOnce(&ArrayD<S>, &mut GradSink<S>)>;

struct Node<S: Scalar> {
    value: ArrayD<S>,
    backward: Option<BackFn<S>>,
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a, S: Scalar> {
    grads: &'a mut Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> GradSink<'_, S> {
    /// Accumulate `g` into the gradient slot of `v`.
    pub fn add(&mut self, v: Var, g: ArrayD<S>) {
        match &mut self.grads[v.0] {
            Some(acc) => *acc = &*acc + &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or a zero array of the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<S> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

/// A single-use computation tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    recording: bool,
}

fn bcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `g` down to `target` shape, undoing a forward broadcast.
fn unbroadcast<S: Scalar>(g: &ArrayD<S>, target: &[usize]) -> ArrayD<S> {
    let mut out = g.clone();
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, (&have, &want)) in out.shape().to_vec().iter().zip(target.iter()).enumerate() {
        if want == 1 && have != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn broadcast_to<S: Scalar>(a: &ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
        .to_owned()
}

impl<S: Scalar> Graph<S> {
    /// New recording graph: operations register backward closures.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), recording: true }
    }

    /// Forward-only graph: no closures, no gradient support.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<S>, backward: Option<BackFn<S>>) -> Var {
        self.nodes.push(Node { value, backward: if self.recording { backward } else { None } });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input tensor (leaf).
    pub fn leaf(&mut self, value: ArrayD<S>) -> Var {
        self.push(value, None)
    }

    /// Insert a scalar as a `[1]` tensor.
    pub fn scalar(&mut self, v: S) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn scalar_f64(&mut self, v: f64) -> Var {
        self.scalar(S::from_f64(v))
    }

    /// Value of a node.
    pub fn val(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    /// Value of a `[1]`-shaped (or single-element) node as `S`.
    pub fn scalar_val(&self, v: Var) -> S {
        let a = self.val(v);
        assert_eq!(a.len(), 1, "scalar_val on tensor of shape {:?}", a.shape());
        *a.iter().next().unwrap()
    }

    /// Cut the gradient flow: same value, fresh leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.val(v).clone();
        self.leaf(value)
    }

    /// Run the backward pass from `loss` (a single-element tensor).
    ///
    /// Consumes the tape's closures; call at most once per graph.
    pub fn backward(&mut self, loss: Var) -> Gradients<S> {
        assert!(self.recording, "backward on an inference graph");
        let n = self.nodes.len();
        let mut grads: Vec<Option<ArrayD<S>>> = (0..n).map(|_| None).collect();
        let seed = ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), S::one());
        assert_eq!(seed.len(), 1, "backward expects a single-element loss");
        grads[loss.0] = Some(seed);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = self.nodes[id].backward.take() {
                let mut sink = GradSink { grads: &mut grads };
                back(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    // ------------------------------------------------------------------
    // elementwise binary (NumPy-style broadcasting)
    // ------------------------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        back: impl FnOnce(&ArrayD<S>, &ArrayD<S>) -> (BackPair<S>, BackPair<S>) + 'static,
    ) -> Var {
        let (av, bv) = (self.val(a).clone(), self.val(b).clone());
        let shape = bcast_shape(av.shape(), bv.shape());
        let ab = broadcast_to(&av, &shape);
        let bb = broadcast_to(&bv, &shape);
        let mut out = ab.clone();
        out.zip_mut_with(&bb, |x, &y| *x = f(*x, y));
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        let bw: Option<BackFn<S>> = if self.recording {
            let (fa, fb) = back(&ab, &bb);
            Some(Box::new(move |g, sink| {
                sink.add(a, unbroadcast(&fa(g), &sa));
                sink.add(b, unbroadcast(&fb(g), &sb));
            }))
        } else {
            None
        };
        self.push(out, bw)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |_, _| {
            (Box::new(|g| g.clone()), Box::new(|g| g.clone()))
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |_, _| {
            (Box::new(|g| g.clone()), Box::new(|g| g.mapv(|x| -x)))
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |ab, bb| {
            let (ac, bc) = (ab.clone(), bb.clone());
            (
                Box::new(move |g: &ArrayD<S>| g * &bc) as BoxedGrad<S>,
                Box::new(move |g: &ArrayD<S>| g * &ac) as BoxedGrad<S>,
            )
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, |ab, bb| {
            let (ac, bc, bc2) = (ab.clone(), bb.clone(), bb.clone());
            (
                Box::new(move |g: &ArrayD<S>| g / &bc) as BoxedGrad<S>,
                Box::new(move |g: &ArrayD<S>| {
                    let mut d = g * &ac;
                    d.zip_mut_with(&bc2, |x, &y| *x = -*x / (y * y));
                    d
                }) as BoxedGrad<S>,
            )
        })
    }

    // ------------------------------------------------------------------
    // elementwise unary
    // ------------------------------------------------------------------

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(S) -> S,
        dfdx: impl Fn(S, S) -> S + 'static, // (x, y) -> dy/dx
    ) -> Var {
        let x = self.val(a).clone();
        let y = x.mapv(&f);
        let bw: Option<BackFn<S>> = if self.recording {
            let (xc, yc) = (x, y.clone());
            Some(Box::new(move |g, sink| {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(&xc).and(&yc).for_each(|di, &xi, &yi| {
                    *di = *di * dfdx(xi, yi);
                });
                sink.add(a, d);
            }))
        } else {
            None
        };
        self.push(y, bw)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _| -S::one())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |x, _| S::one() / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), |_, y| {
            S::from_f64(0.5) / y
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| S::from_f64(2.0) * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, y| S::one() - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| S::one() / (S::one() + (-x).exp()),
            |_, y| y * (S::one() - y),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x / (S::one() + (-x).exp()),
            |x, _| {
                let s = S::one() / (S::one() + (-x).exp());
                s * (S::one() + x * (S::one() - s))
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > S::zero() { x } else { S::zero() },
            |x, _| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), |x, _| {
            if x > S::zero() {
                S::one()
            } else if x < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        })
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        self.unary(
            a,
            move |x| x.max(l).min(h),
            move |x, _| if x > l && x < h { S::one() } else { S::zero() },
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        self.unary(a, move |x| x * cs, move |_, _| cs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        self.unary(a, move |x| x + cs, |_, _| S::one())
    }

    // ------------------------------------------------------------------
    // reductions
    // ------------------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let shape = x.shape().to_vec();
        let s = x.sum();
        let out = ArrayD::from_elem(IxDyn(&[1]), s);
        let bw: Option<BackFn<S>> = if self.recording {
            Some(Box::new(move |g, sink| {
                let gs = *g.iter().next().unwrap();
                sink.add(a, ArrayD::from_elem(IxDyn(&shape), gs));
            }))
        } else {
            None
        };
        self.push(out, bw)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&mut self, a: Var, ax: usize) -> Var {
        let x = self.val(a);
        let shape = x.shape().to_vec();
        let out = x.sum_axis(Axis(ax));
        let bw: Option<BackFn<S>> = if self.recording {
            Some(Box::new(move |g, sink| {
                let expanded = g.clone().insert_axis(Axis(ax));
                sink.add(a, broadcast_to(&expanded, &shape));
            }))
        } else {
            None
        };
        self.push(out, bw)
    }

    pub fn mean_axis(&mut self, a: Var, ax: usize) -> Var {
        let n = self.val(a).shape()[ax];
        let s = self.sum_axis(a, ax);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `ax`, keeping it as a length-1 axis.
    pub fn sum_axis_keepdim(&mut self, a: Var, ax: usize) -> Var {
        let s = self.sum_axis(a, ax);
        let mut shape = self.val(s).shape().to_vec();
        shape.insert(ax, 1);
        self.reshape(s, &shape)
    }

    pub fn mean_axis_keepdim(&mut self, a: Var, ax: usize) -> Var {
        let n = self.val(a).shape()[ax];
        let s = self.sum_axis_keepdim(a, ax);
        self.scale(s, 1.0 / n as f64)
    }

    // ------------------------------------------------------------------
    // shape
    // ------------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let x = self.val(a);
        let orig = x.shape().to_vec();
        let out = x
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", orig, shape));
        let bw: Option<BackFn<S>> = if self.recording {
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone().into_shape_with_order(IxDyn(&orig)).unwrap());
            }))
        } else {
            None
        };
        self.push(out, bw)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let x = self.val(a);
        let out = x.clone().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        let bw: Option<BackFn<S>> = if self.recording {
            Some(Box::new(move |g, sink| {
                sink.add(
                    a,
                    g.clone().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned(),
                );
            }))
        } else {
            None
        };
        self.push(out, bw)
    }

    /// 2-D transpose convenience.
    pub fn t2(&mut self, a: Var) -> Var {
        assert_eq!(self.val(a).ndim(), 2);
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, ax: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.val(p).view()).collect();
        let out = ndarray::concatenate(Axis(ax), &views).expect("concat shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|&p| self.val(p).shape()[ax]).collect();
        let ids: Vec<Var> = parts.to_vec();
        let bw: Option<BackFn<S>> = if self.recording {
            Some(Box::new(move |g, sink| {
                let mut off = 0usize;
                for (v, sz) in ids.iter().zip(sizes.iter()) {
                    let part = g
                        .slice_axis(Axis(ax), Slice::from(off..off + sz))
                        .to_owned();
                    sink.add(*v, part);
                    off += sz;
                }
            }))
        } else {
            None
        };
        self.push(out, bw)
    }

    pub fn slice_axis(&mut self, a: Var, ax: usize, start: usize, end: usize) -> Var {
        let x = self.val(a);
        let shape = x.shape().to_vec();
        assert!(end <= shape[ax] && start <= end);
        let out = x.slice_axis(Axis(ax), Slice::from(start..end)).to_owned();
        let bw: Option<BackFn<S>> = if self.recording {
            Some(Box::new(move |g, sink| {
                let mut full = ArrayD::zeros(IxDyn(&shape));
                full.slice_axis_mut(Axis(ax), Slice::from(start..end)).assign(g);
                sink.add(a, full);
            }))
        } else {
            None
        };
        self.push(out, bw)
    }

    // ------------------------------------------------------------------
    // linear algebra
    // ------------------------------------------------------------------

    /// Matrix product of 2-D tensors `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.val(a).clone().into_dimensionality::<ndarray::Ix2>().expect("matmul lhs not 2-D");
        let bv = self.val(b).clone().into_dimensionality::<ndarray::Ix2>().expect("matmul rhs not 2-D");
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dim mismatch");
        let out = av.dot(&bv).into_dyn();
        let bw: Option<BackFn<S>> = if self.recording {
            Some(Box::new(move |g, sink| {
                let g2 = g.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                sink.add(a, g2.dot(&bv.t()).into_dyn());
                sink.add(b, av.t().dot(&g2).into_dyn());
            }))
        } else {
            None
        };
        self.push(out, bw)
    }

    /// Batched matrix product `[b,m,k] x [b,k,n] -> [b,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.val(a).clone().into_dimensionality::<ndarray::Ix3>().expect("bmm lhs not 3-D");
        let bv = self.val(b).clone().into_dimensionality::<ndarray::Ix3>().expect("bmm rhs not 3-D");
        let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (nb2, k2, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert!(nb == nb2 && k == k2, "bmm shape mismatch");
        let mut out = ndarray::Array3::<S>::zeros((nb, m, n));
        for i in 0..nb {
            let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let bw: Option<BackFn<S>> = if self.recording {
            Some(Box::new(move |g, sink| {
                let g3 = g.clone().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut da = ndarray::Array3::<S>::zeros((nb, m, k));
                let mut db = ndarray::Array3::<S>::zeros((nb, k, n));
                for i in 0..nb {
                    let gi = g3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
                }
                sink.add(a, da.into_dyn());
                sink.add(b, db.into_dyn());
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), bw)
    }

    // ------------------------------------------------------------------
    // softmax
    // ------------------------------------------------------------------

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let x = self.val(a).clone();
        let last = x.ndim() - 1;
        let mut y = x;
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(S::neg_infinity(), |acc, v| acc.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let bw: Option<BackFn<S>> = if self.recording {
            let yc = y.clone();
            Some(Box::new(move |g, sink| {
                // dx = y * (g - sum(g*y, last, keepdim))
                let gy = g * &yc;
                let dot = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(&broadcast_to(&dot, g.shape()))
                    .and(&yc)
                    .for_each(|di, &s, &yi| *di = (*di - s) * yi);
                sink.add(a, d);
            }))
        } else {
            None
        };
        self.push(y, bw)
    }

    // ------------------------------------------------------------------
    // convolution support
    // ------------------------------------------------------------------

    /// Unfold a `[C,H,W]` tensor into convolution columns
    /// `[outH*outW, C*k*k]` with zero padding.
    pub fn im2col(&mut self, a: Var, k: usize, stride: usize, pad: usize) -> Var {
        let x = self.val(a).clone().into_dimensionality::<ndarray::Ix3>().expect("im2col input not 3-D");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut cols = ndarray::Array2::<S>::zeros((oh * ow, c * k * k));
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                cols[[row, ci * k * k + ky * k + kx]] =
                                    x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        let bw: Option<BackFn<S>> = if self.recording {
            Some(Box::new(move |g, sink| {
                let g2 = g.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut dx = ndarray::Array3::<S>::zeros((c, h, w));
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = oy * ow + ox;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        dx[[ci, iy as usize, ix as usize]] +=
                                            g2[[row, ci * k * k + ky * k + kx]];
                                    }
                                }
                            }
                        }
                    }
                }
                sink.add(a, dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(cols.into_dyn(), bw)
    }

    /// Embed `a` into a zero canvas of `full_shape` at `offsets`
    /// (one offset per axis). Backward is the matching slice.
    pub fn place(&mut self, a: Var, full_shape: &[usize], offsets: &[usize]) -> Var {
        let x = self.val(a).clone();
        assert_eq!(x.ndim(), full_shape.len());
        assert_eq!(offsets.len(), full_shape.len());
        for ((&d, &f), &o) in x.shape().iter().zip(full_shape.iter()).zip(offsets.iter()) {
            assert!(o + d <= f, "region exceeds canvas: {o}+{d} > {f}");
        }
        let mut out = ArrayD::zeros(IxDyn(full_shape));
        let mut region = out.view_mut();
        for (ax, (&o, &d)) in offsets.iter().zip(x.shape().iter()).enumerate() {
            region.slice_axis_inplace(Axis(ax), Slice::from(o..o + d));
        }
        region.assign(&x);
        let offs = offsets.to_vec();
        let dims = x.shape().to_vec();
        let bw: Option<BackFn<S>> = if self.recording {
            Some(Box::new(move |g, sink| {
                let mut view = g.view();
                for (ax, (&o, &d)) in offs.iter().zip(dims.iter()).enumerate() {
                    view.slice_axis_inplace(Axis(ax), Slice::from(o..o + d));
                }
                sink.add(a, view.to_owned());
            }))
        } else {
            None
        };
        self.push(out, bw)
    }

    /// Nearest-neighbor 2x upsample of a `[C,H,W]` tensor.
    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let x = self.val(a).clone().into_dimensionality::<ndarray::Ix3>().expect("upsample input not 3-D");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = ndarray::Array3::<S>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[[ci, y, xx]] = x[[ci, y / 2, xx / 2]];
                }
            }
        }
        let bw: Option<BackFn<S>> = if self.recording {
            Some(Box::new(move |g, sink| {
                let g3 = g.clone().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut dx = ndarray::Array3::<S>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[[ci, y / 2, xx / 2]] += g3[[ci, y, xx]];
                        }
                    }
                }
                sink.add(a, dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), bw)
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

type BoxedGrad<S> = Box<dyn FnOnce(&ArrayD<S>) -> ArrayD<S>>;
type BackPair<S> = BoxedGrad<S>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::finite_diff_scalar_fn;
    use ndarray::arr2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.leaf(arr2(&[[0.5, -1.0], [2.0, 0.0]]).into_dyn());
        let c = g.mul(a, b);
        let d = g.add(c, a);
        let loss = g.sum_all(d);
        let grads = g.backward(loss);
        let da = grads.get(a).unwrap();
        // d(sum(a*b + a))/da = b + 1
        assert_eq!(da[[0, 0]], 1.5);
        assert_eq!(da[[0, 1]], 0.0);
        assert_eq!(da[[1, 0]], 3.0);
        assert_eq!(da[[1, 1]], 1.0);
    }

    #[test]
    fn broadcast_backward_sums() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.leaf(ndarray::arr1(&[10.0, 20.0]).into_dyn());
        let c = g.mul(a, b);
        let loss = g.sum_all(c);
        let grads = g.backward(loss);
        let db = grads.get(b).unwrap();
        // each column of a sums into the bias grad
        assert_eq!(db[[0]], 4.0);
        assert_eq!(db[[1]], 6.0);
    }

    #[test]
    fn matmul_matches_finite_diff() {
        let f = |p: &[f64]| {
            let mut g = Graph::<f64>::new();
            let a = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 3]), p[..6].to_vec()).unwrap());
            let b = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 2]), p[6..].to_vec()).unwrap());
            let c = g.matmul(a, b);
            let s = g.square(c);
            let l = g.sum_all(s);
            g.scalar_val(l)
        };
        let p: Vec<f64> = (0..12).map(|i| 0.3 * i as f64 - 1.0).collect();
        let fd = finite_diff_scalar_fn(&f, &p, 1e-5);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 3]), p[..6].to_vec()).unwrap());
        let b = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 2]), p[6..].to_vec()).unwrap());
        let c = g.matmul(a, b);
        let s = g.square(c);
        let l = g.sum_all(s);
        let grads = g.backward(l);
        let got: Vec<f64> = grads
            .get(a)
            .unwrap()
            .iter()
            .chain(grads.get(b).unwrap().iter())
            .cloned()
            .collect();
        for (x, y) in got.iter().zip(fd.iter()) {
            assert!(close(*x, *y, 1e-6), "{x} vs {y}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_checks() {
        let p: Vec<f64> = vec![0.3, -1.2, 2.0, 0.1, 0.0, -0.4];
        let f = |p: &[f64]| {
            let mut g = Graph::<f64>::new();
            let a = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 3]), p.to_vec()).unwrap());
            let sm = g.softmax_last(a);
            let w = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, -1.0, 0.5, 0.1, 3.0]).unwrap());
            let prod = g.mul(sm, w);
            let l = g.sum_all(prod);
            g.scalar_val(l)
        };
        let fd = finite_diff_scalar_fn(&f, &p, 1e-6);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 3]), p.clone()).unwrap());
        let sm = g.softmax_last(a);
        for row in g.val(sm).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let w = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, -1.0, 0.5, 0.1, 3.0]).unwrap());
        let prod = g.mul(sm, w);
        let l = g.sum_all(prod);
        let grads = g.backward(l);
        for (x, y) in grads.get(a).unwrap().iter().zip(fd.iter()) {
            assert!(close(*x, *y, 1e-5), "{x} vs {y}");
        }
    }

    #[test]
    fn im2col_conv_grad_checks() {
        // 1x3x3 input, 2 output channels, k=3 pad=1
        let px: Vec<f64> = (0..9).map(|i| (i as f64) * 0.1 - 0.4).collect();
        let pw: Vec<f64> = (0..18).map(|i| ((i * 7 % 5) as f64) * 0.2 - 0.3).collect();
        let run = |px: &[f64], pw: &[f64]| -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 3, 3]), px.to_vec()).unwrap());
            let w = g.leaf(ArrayD::from_shape_vec(IxDyn(&[9, 2]), pw.to_vec()).unwrap());
            let cols = g.im2col(x, 3, 1, 1);
            let y = g.matmul(cols, w);
            let s = g.square(y);
            let l = g.sum_all(s);
            let lv = g.scalar_val(l);
            let grads = g.backward(l);
            let dx: Vec<f64> = grads.get(x).unwrap().iter().cloned().collect();
            let dw: Vec<f64> = grads.get(w).unwrap().iter().cloned().collect();
            (lv, Some((dx, dw)))
        };
        let (_, got) = run(&px, &pw);
        let (dx, dw) = got.unwrap();
        let fx = |p: &[f64]| run(p, &pw).0;
        let fw = |p: &[f64]| run(&px, p).0;
        for (x, y) in dx.iter().zip(finite_diff_scalar_fn(&fx, &px, 1e-5)) {
            assert!(close(*x, y, 1e-6), "{x} vs {y}");
        }
        for (x, y) in dw.iter().zip(finite_diff_scalar_fn(&fw, &pw, 1e-5)) {
            assert!(close(*x, y, 1e-6), "{x} vs {y}");
        }
    }

    #[test]
    fn upsample_and_slice_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let up = g.upsample_nearest2(x);
        assert_eq!(g.val(up).shape(), &[1, 4, 4]);
        assert_eq!(g.val(up)[[0, 0, 1]], 1.0);
        assert_eq!(g.val(up)[[0, 3, 3]], 4.0);
        let l = g.sum_all(up);
        let grads = g.backward(l);
        // every input pixel fans out to 4 outputs
        for v in grads.get(x).unwrap().iter() {
            assert_eq!(*v, 4.0);
        }
    }

    #[test]
    fn concat_and_slice_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(ndarray::arr1(&[1.0, 2.0]).into_dyn());
        let b = g.leaf(ndarray::arr1(&[3.0]).into_dyn());
        let c = g.concat(0, &[a, b]);
        assert_eq!(g.val(c).len(), 3);
        let s = g.slice_axis(c, 0, 1, 3);
        let sq = g.square(s);
        let l = g.sum_all(sq);
        let grads = g.backward(l);
        assert_eq!(grads.get(a).unwrap()[[0]], 0.0);
        assert_eq!(grads.get(a).unwrap()[[1]], 4.0);
        assert_eq!(grads.get(b).unwrap()[[0]], 6.0);
    }

    #[test]
    fn place_forward_and_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let canvas = g.place(a, &[1, 4, 4], &[0, 1, 2]);
        assert_eq!(g.val(canvas)[[0, 1, 2]], 1.0);
        assert_eq!(g.val(canvas)[[0, 2, 3]], 4.0);
        assert_eq!(g.val(canvas)[[0, 0, 0]], 0.0);
        let sq = g.square(canvas);
        let l = g.sum_all(sq);
        let grads = g.backward(l);
        let da = grads.get(a).unwrap();
        assert_eq!(da[[0, 0, 0]], 2.0);
        assert_eq!(da[[0, 1, 1]], 8.0);
    }

    #[test]
    fn inference_graph_allocates_no_closures() {
        let mut g = Graph::<f64>::inference();
        let a = g.leaf(ndarray::arr1(&[1.0, -2.0]).into_dyn());
        let b = g.tanh(a);
        assert!(g.val(b)[[0]] > 0.0);
        assert!(!g.is_recording());
    }
}
