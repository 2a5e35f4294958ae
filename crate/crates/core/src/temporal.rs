//! Temporal-consistency module: frame-axis attention inserted after every
//! attention site of the denoiser.
//!
//! Layout contract, with `[B, C, F, H, W]` as the canonical frame-stack
//! shape:
//! - `fold_spatial`  -> `[(B·F), C, H, W]`, one batch entry per frame, for
//!   per-frame spatial ops;
//! - `fold_temporal` -> `[(B·H·W), C, F]`, one batch entry per spatial
//!   location, for attention across frames.
//!
//! Both folds are pure reshapes/transposes: bit-exact, inverted exactly by
//! their unfold partners. The attention output projection starts at zero, so
//! at initialization the module is an exact identity on every frame.

use crate::nn::{init_linear, init_linear_zero, sinusoidal_embedding, Binding};
use ageview_autograd::store::SeedRng;
use ageview_autograd::{Graph, ParamStore, Scalar, Var};

/// `[B, C, F, H, W]` -> `[(B·F), C, H, W]`.
pub fn fold_spatial<S: Scalar>(g: &mut Graph<S>, x: Var) -> Var {
    let sh = g.val(x).shape().to_vec();
    assert_eq!(sh.len(), 5, "fold_spatial expects [B,C,F,H,W]");
    let (b, c, f, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let p = g.permute(x, &[0, 2, 1, 3, 4]); // [B,F,C,H,W]
    g.reshape(p, &[b * f, c, h, w])
}

/// Inverse of [`fold_spatial`].
pub fn unfold_spatial<S: Scalar>(g: &mut Graph<S>, x: Var, b: usize, f: usize) -> Var {
    let sh = g.val(x).shape().to_vec();
    assert_eq!(sh.len(), 4);
    assert_eq!(sh[0], b * f, "batch axis must be B·F");
    let (c, h, w) = (sh[1], sh[2], sh[3]);
    let r = g.reshape(x, &[b, f, c, h, w]);
    g.permute(r, &[0, 2, 1, 3, 4])
}

/// `[B, C, F, H, W]` -> `[(B·H·W), C, F]`.
pub fn fold_temporal<S: Scalar>(g: &mut Graph<S>, x: Var) -> Var {
    let sh = g.val(x).shape().to_vec();
    assert_eq!(sh.len(), 5, "fold_temporal expects [B,C,F,H,W]");
    let (b, c, f, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let p = g.permute(x, &[0, 3, 4, 1, 2]); // [B,H,W,C,F]
    g.reshape(p, &[b * h * w, c, f])
}

/// Inverse of [`fold_temporal`].
pub fn unfold_temporal<S: Scalar>(g: &mut Graph<S>, x: Var, b: usize, h: usize, w: usize) -> Var {
    let sh = g.val(x).shape().to_vec();
    assert_eq!(sh.len(), 3);
    assert_eq!(sh[0], b * h * w, "batch axis must be B·H·W");
    let (c, f) = (sh[1], sh[2]);
    let r = g.reshape(x, &[b, h, w, c, f]);
    g.permute(r, &[0, 3, 4, 1, 2])
}

/// Insert the four projection matrices of one temporal site; the output
/// projection is zero so the site starts as an identity.
pub fn init_temporal_site<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut SeedRng,
    site: &str,
    c: usize,
) {
    let std = 1.0 / (c as f64).sqrt();
    init_linear(store, rng, &format!("{site}.wq"), c, c, std);
    init_linear(store, rng, &format!("{site}.wk"), c, c, std);
    init_linear(store, rng, &format!("{site}.wv"), c, c, std);
    init_linear_zero(store, &format!("{site}.wo"), c, c);
}

/// Frame-axis attention over a group of same-shaped `[C, H, W]` frames.
///
/// Tokens are per spatial location, sequence axis = frames, weights shared
/// across locations. With `frame_encoding` a sinusoidal frame-index code is
/// added before the projections (off by default, which makes the module
/// equivariant to frame permutations).
pub fn attend_frames<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binding<S>,
    store: &ParamStore<S>,
    site: &str,
    frames: &[Var],
    frame_encoding: bool,
) -> Vec<Var> {
    assert!(!frames.is_empty());
    let sh = g.val(frames[0]).shape().to_vec();
    assert_eq!(sh.len(), 3, "attend_frames expects [C,H,W] frames");
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let f = frames.len();

    // stack to [1, C, F, H, W]
    let per: Vec<Var> = frames.iter().map(|&fr| g.reshape(fr, &[1, c, 1, h, w])).collect();
    let stacked = if per.len() == 1 { per[0] } else { g.concat(2, &per) };
    let folded = fold_temporal(g, stacked); // [HW, C, F]
    let mut tok = g.permute(folded, &[0, 2, 1]); // [HW, F, C]

    if frame_encoding {
        let mut enc = ndarray::ArrayD::<S>::zeros(ndarray::IxDyn(&[1, f, c]));
        for fi in 0..f {
            let e = sinusoidal_embedding::<S>(fi as f64 / f as f64, c);
            for ci in 0..c {
                enc[[0, fi, ci]] = e[[0, ci]];
            }
        }
        let ev = g.leaf(enc);
        tok = g.add(tok, ev);
    }

    let project = |g: &mut Graph<S>, b: &mut Binding<S>, name: &str, x: Var| -> Var {
        let flat = g.reshape(x, &[h * w * f, c]);
        let y = crate::nn::linear(g, b, store, name, flat);
        g.reshape(y, &[h * w, f, c])
    };
    let q = project(g, b, &format!("{site}.wq"), tok);
    let k = project(g, b, &format!("{site}.wk"), tok);
    let v = project(g, b, &format!("{site}.wv"), tok);
    let kt = g.permute(k, &[0, 2, 1]); // [HW, C, F]
    let logits = g.bmm(q, kt); // [HW, F, F]
    let logits = g.scale(logits, 1.0 / (c as f64).sqrt());
    let attn = g.softmax_last(logits);
    let mixed = g.bmm(attn, v); // [HW, F, C]
    let out = project(g, b, &format!("{site}.wo"), mixed);
    let res = g.add(tok, out); // zero-init wo -> identity

    // back to frames: [HW, F, C] -> [HW, C, F] -> [1,C,F,H,W] -> split
    let back = g.permute(res, &[0, 2, 1]);
    let unf = unfold_temporal(g, back, 1, h, w); // [1, C, F, H, W]
    let spat = fold_spatial(g, unf); // [F, C, H, W]
    (0..f)
        .map(|fi| {
            let fr = g.slice_axis(spat, 0, fi, fi + 1);
            g.reshape(fr, &[c, h, w])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ageview_autograd::store::{normal_array, seeded};
    use ndarray::{ArrayD, IxDyn};

    fn arange(shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn fold_spatial_exhaustive_index_oracle_and_roundtrip() {
        let x = arange(&[2, 3, 4, 5, 6]);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone());
        let folded = fold_spatial(&mut g, xv);
        let fv = g.val(folded).clone();
        assert_eq!(fv.shape(), &[8, 3, 5, 6]);
        for b in 0..2 {
            for c in 0..3 {
                for f in 0..4 {
                    for h in 0..5 {
                        for w in 0..6 {
                            assert_eq!(
                                fv[[b * 4 + f, c, h, w]],
                                x[[b, c, f, h, w]],
                                "({b},{c},{f},{h},{w})"
                            );
                        }
                    }
                }
            }
        }
        let back = unfold_spatial(&mut g, folded, 2, 4);
        assert_eq!(g.val(back), &x, "unfold(fold) must be bit-exact");
    }

    #[test]
    fn fold_temporal_exhaustive_index_oracle_and_roundtrip() {
        let x = arange(&[2, 3, 4, 5, 6]);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone());
        let folded = fold_temporal(&mut g, xv);
        let fv = g.val(folded).clone();
        assert_eq!(fv.shape(), &[2 * 5 * 6, 3, 4]);
        for b in 0..2 {
            for c in 0..3 {
                for f in 0..4 {
                    for h in 0..5 {
                        for w in 0..6 {
                            assert_eq!(
                                fv[[(b * 5 + h) * 6 + w, c, f]],
                                x[[b, c, f, h, w]],
                                "({b},{c},{f},{h},{w})"
                            );
                        }
                    }
                }
            }
        }
        let back = unfold_temporal(&mut g, folded, 2, 5, 6);
        assert_eq!(g.val(back), &x, "unfold(fold) must be bit-exact");
    }

    #[test]
    fn folds_backward_routes_gradients_exactly() {
        let x = arange(&[1, 2, 3, 2, 2]);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone());
        let folded = fold_temporal(&mut g, xv);
        // loss = weighted sum with distinct weights -> gradient must be the
        // weights routed back through the same index map
        let wts = arange(&[4, 2, 3]);
        let wv = g.leaf(wts.clone());
        let prod = g.mul(folded, wv);
        let l = g.sum_all(prod);
        let grads = g.backward(l);
        let dx = grads.get(xv).unwrap();
        for b in 0..1 {
            for c in 0..2 {
                for f in 0..3 {
                    for h in 0..2 {
                        for w in 0..2 {
                            assert_eq!(
                                dx[[b, c, f, h, w]],
                                wts[[(b * 2 + h) * 2 + w, c, f]]
                            );
                        }
                    }
                }
            }
        }
    }

    fn init_site(seed: u64, c: usize) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        init_temporal_site(&mut store, &mut rng, "temporal.test", c);
        store
    }

    #[test]
    fn zero_init_site_is_exact_identity_per_frame() {
        let store = init_site(1, 6);
        let mut rng = seeded(2);
        let frames: Vec<ArrayD<f64>> =
            (0..4).map(|_| normal_array(&mut rng, &[6, 3, 3], 0.0, 1.0)).collect();
        let mut g = Graph::<f64>::new();
        let mut b = Binding::new();
        let fv: Vec<Var> = frames.iter().map(|f| g.leaf(f.clone())).collect();
        let out = attend_frames(&mut g, &mut b, &store, "temporal.test", &fv, false);
        assert_eq!(out.len(), 4);
        for (o, orig) in out.iter().zip(frames.iter()) {
            assert_eq!(g.val(*o), orig, "zero-init temporal site must pass frames through");
        }
    }

    #[test]
    fn single_frame_group_is_supported() {
        let store = init_site(3, 4);
        let mut rng = seeded(4);
        let frame = normal_array::<f64>(&mut rng, &[4, 2, 2], 0.0, 1.0);
        let mut g = Graph::<f64>::new();
        let mut b = Binding::new();
        let fv = g.leaf(frame.clone());
        let out = attend_frames(&mut g, &mut b, &store, "temporal.test", &[fv], false);
        assert_eq!(out.len(), 1);
        assert_eq!(g.val(out[0]), &frame);
    }

    #[test]
    fn permutation_equivariant_without_frame_encoding() {
        let mut store = init_site(5, 6);
        // make wo nonzero so the attention actually mixes
        let wo = normal_array::<f64>(&mut seeded(6), &[6, 6], 0.0, 0.5);
        store.get_mut("temporal.test.wo.w").assign(&wo);
        let mut rng = seeded(7);
        let frames: Vec<ArrayD<f64>> =
            (0..3).map(|_| normal_array(&mut rng, &[6, 2, 2], 0.0, 1.0)).collect();
        let run = |order: &[usize], enc: bool| -> Vec<ArrayD<f64>> {
            let mut g = Graph::<f64>::inference();
            let mut b = Binding::new();
            let fv: Vec<Var> = order.iter().map(|&i| g.leaf(frames[i].clone())).collect();
            let out = attend_frames(&mut g, &mut b, &store, "temporal.test", &fv, enc);
            out.iter().map(|&o| g.val(o).clone()).collect()
        };
        let base = run(&[0, 1, 2], false);
        let perm = run(&[2, 0, 1], false);
        for (i, &src) in [2usize, 0, 1].iter().enumerate() {
            let diff: f64 = base[src]
                .iter()
                .zip(perm[i].iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-12, "frame {i}: permutation diff {diff}");
        }
        // with the frame encoding on, outputs depend on position
        let enc_base = run(&[0, 1, 2], true);
        let enc_perm = run(&[2, 0, 1], true);
        let diff: f64 = enc_base[2]
            .iter()
            .zip(enc_perm[0].iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "frame encoding must break permutation equivariance");
    }

    #[test]
    fn gradients_match_finite_differences_with_active_weights() {
        let mut store = init_site(8, 3);
        let wo = normal_array::<f64>(&mut seeded(9), &[3, 3], 0.0, 0.5);
        store.get_mut("temporal.test.wo.w").assign(&wo);
        let mut rng = seeded(10);
        let frames: Vec<ArrayD<f64>> =
            (0..2).map(|_| normal_array(&mut rng, &[3, 2, 2], 0.0, 1.0)).collect();
        let loss_of = |store: &ParamStore<f64>, frames: &[ArrayD<f64>]| -> f64 {
            let mut g = Graph::<f64>::inference();
            let mut b = Binding::new();
            let fv: Vec<Var> = frames.iter().map(|f| g.leaf(f.clone())).collect();
            let out = attend_frames(&mut g, &mut b, &store, "temporal.test", &fv, false);
            let s = g.concat(0, &out);
            let sq = g.square(s);
            let l = g.mean_all(sq);
            g.scalar_val(l)
        };
        // tape gradients
        let mut g = Graph::<f64>::new();
        let mut b = Binding::new();
        let fv: Vec<Var> = frames.iter().map(|f| g.leaf(f.clone())).collect();
        let out = attend_frames(&mut g, &mut b, &store, "temporal.test", &fv, false);
        let s = g.concat(0, &out);
        let sq = g.square(s);
        let l = g.mean_all(sq);
        let grads = g.backward(l);
        // parameter gradients
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        let got = b.grads(&grads, |_| true);
        for n in &names {
            let base = store.get(n).clone();
            if base.len() > 20 {
                continue; // probe small tensors fully; biases and 3x3 mats
            }
            let mut store2 = store.clone();
            let tape = got.get(n).cloned().unwrap_or_else(|| {
                ArrayD::zeros(IxDyn(base.shape()))
            });
            for i in 0..base.len() {
                let mut plus: Vec<f64> = base.iter().cloned().collect();
                plus[i] += 1e-6;
                store2
                    .get_mut(n)
                    .assign(&ArrayD::from_shape_vec(IxDyn(base.shape()), plus).unwrap());
                let fp = loss_of(&store2, &frames);
                let mut minus: Vec<f64> = base.iter().cloned().collect();
                minus[i] -= 1e-6;
                store2
                    .get_mut(n)
                    .assign(&ArrayD::from_shape_vec(IxDyn(base.shape()), minus).unwrap());
                let fm = loss_of(&store2, &frames);
                store2.get_mut(n).assign(&base);
                let fd = (fp - fm) / 2e-6;
                let tg = tape.as_slice().unwrap()[i];
                assert!(
                    (tg - fd).abs() <= 1e-4 * fd.abs().max(tg.abs()).max(1e-2),
                    "{n}[{i}]: {tg} vs {fd}"
                );
            }
        }
        // frame gradients
        for (fi, fvar) in fv.iter().enumerate() {
            let dframe = grads.get(*fvar).unwrap().clone();
            for i in [0usize, 5, 11] {
                let mut plus = frames.clone();
                plus[fi].as_slice_mut().unwrap()[i] += 1e-6;
                let fp = loss_of(&store, &plus);
                let mut minus = frames.clone();
                minus[fi].as_slice_mut().unwrap()[i] -= 1e-6;
                let fm = loss_of(&store, &minus);
                let fd = (fp - fm) / 2e-6;
                let tg = dframe.as_slice().unwrap()[i];
                assert!(
                    (tg - fd).abs() <= 1e-4 * fd.abs().max(tg.abs()).max(1e-2),
                    "frame {fi}[{i}]: {tg} vs {fd}"
                );
            }
        }
    }
}
