//! Forward ops against direct loop references, and every backward rule
//! against central finite differences.

use islab_tensor::{Graph, PadMode, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compares autodiff against central differences for every element of every
/// parameter. `build` must return a scalar loss.
fn check_grads(store: &ParamStore<f64>, build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var) {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss).unwrap();
    let h = 1e-6;
    for id in store.ids() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in 0..store.get(id).numel() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += delta;
                let mut g = Graph::new();
                let l = build(&mut g, &s);
                g.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (fd - a).abs() / (1e-6 + fd.abs().max(a.abs()));
            assert!(err < 1e-5, "{}[{i}]: fd {fd} vs autodiff {a}", store.name(id));
        }
    }
}

fn weights(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(y).numel();
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let flat = g.reshape(y, &[n]).unwrap();
    g.weighted_sum(flat, &c).unwrap()
}

fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, k, _) = w.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for bi in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xx * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at4(bi, ic, iy as usize, ix as usize)
                                        * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out.data_mut()[((bi * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn conv_t_reference(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, out_pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (_, o, k, _) = w.dims4().unwrap();
    let oh = (h - 1) * stride + k + out_pad - 2 * pad;
    let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for bi in 0..n {
        for ic in 0..c {
            for i in 0..h {
                for j in 0..wd {
                    for oc in 0..o {
                        for ki in 0..k {
                            for kj in 0..k {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < oh && (xx as usize) < ow {
                                    out.data_mut()[((bi * o + oc) * oh + y as usize) * ow + xx as usize] +=
                                        x.at4(bi, ic, i, j) * w.data()[((ic * o + oc) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_forward_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(stride, pad, k) in &[(1, 0, 3), (2, 1, 3), (2, 1, 4), (1, 3, 7), (1, 1, 4)] {
        let x = rand_tensor(&mut rng, &[2, 3, 9, 8]);
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let b = rand_tensor(&mut rng, &[4]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = conv_reference(&x, &w, b.data(), stride, pad);
        assert_eq!(g.shape(y), want.shape());
        for (a, e) in g.value(y).data().iter().zip(want.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_transpose_forward_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 3, 5, 4]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv_transpose2d(xv, wv, None, 2, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 2, 10, 8]);
    let want = conv_t_reference(&x, &w, 2, 1, 1);
    for (a, e) in g.value(y).data().iter().zip(want.data()) {
        assert!((a - e).abs() < 1e-12);
    }
}

fn store_with(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes.iter().map(|(n, sh)| s.add(*n, rand_tensor(rng, sh)).unwrap()).collect();
    (s, ids)
}

#[test]
fn conv_stack_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (store, ids) = store_with(
        &mut rng,
        &[
            ("x", &[2, 2, 6, 6]),
            ("w1", &[3, 2, 3, 3]),
            ("b1", &[3]),
            ("wt", &[3, 2, 3, 3]),
            ("bt", &[2]),
        ],
    );
    check_grads(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let w1 = g.param(s, ids[1]);
        let b1 = g.param(s, ids[2]);
        let wt = g.param(s, ids[3]);
        let bt = g.param(s, ids[4]);
        let p = g.pad(x, 1, PadMode::Reflect).unwrap();
        let y = g.conv2d(p, w1, Some(b1), 2, 1).unwrap();
        let y = g.conv_transpose2d(y, wt, Some(bt), 2, 1, 1).unwrap();
        weights(g, y, 10)
    });
}

#[test]
fn norm_and_activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (store, ids) = store_with(&mut rng, &[("x", &[2, 3, 4, 5]), ("y", &[2, 3, 4, 5])]);
    check_grads(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let y = g.param(s, ids[1]);
        let n = g.instance_norm(x, 1e-5).unwrap();
        let a = g.tanh(n);
        let b = g.leaky_relu(y, 0.2);
        let c = g.add(a, b).unwrap();
        let d = g.scale(c, 1.5);
        let e = g.relu(d);
        let z = g.pad(e, 2, PadMode::Zero).unwrap();
        weights(g, z, 11)
    });
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (store, ids) = store_with(&mut rng, &[("x", &[3, 2, 4, 4]), ("y", &[3, 1, 4, 4])]);
    check_grads(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let y = g.param(s, ids[1]);
        let c = g.concat_channels(&[x, y]).unwrap();
        let sel = g.select_channels(c, &[2, 0]).unwrap();
        let gb = g.gather_batch(sel, &[2, 0, 2]).unwrap();
        let cb = g.concat_batch(&[gb, sel]).unwrap();
        let p = g.max_pool2(cb).unwrap();
        let u = g.upsample2(p).unwrap();
        let l1 = weights(g, u, 12);
        let m = g.mean(x);
        g.add_scalars(&[l1, m]).unwrap()
    });
}

#[test]
fn loss_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (store, ids) = store_with(&mut rng, &[("p", &[2, 1, 3, 3]), ("z", &[2, 1, 2, 2]), ("w", &[4, 3]), ("b", &[4])]);
    let target = std::sync::Arc::new(rand_tensor(&mut rng, &[2, 1, 3, 3]));
    let mask = std::sync::Arc::new(Tensor::from_fn(&[2, 1, 3, 3], |i| if i % 3 == 0 { 0.1 } else { 1.0 }));
    check_grads(&store, |g, s| {
        let p = g.param(s, ids[0]);
        let z = g.param(s, ids[1]);
        let w = g.param(s, ids[2]);
        let b = g.param(s, ids[3]);
        let l1 = g.weighted_l1_rows(p, target.clone(), mask.clone()).unwrap();
        let l1 = g.weighted_sum(l1, &[0.3, 0.7]).unwrap();
        let real = g.bce_logits_rows(z, 1.0).unwrap();
        let real = g.weighted_sum(real, &[0.5, 0.5]).unwrap();
        let fake = g.bce_logits_rows(z, 0.0).unwrap();
        let fake = g.mean(fake);
        let a = g.affine_vec(w, b, &[0.0, 1.0, 0.0]).unwrap();
        let a = g.reshape(a, &[1, 1, 2, 2]).unwrap();
        let a = weights(g, a, 13);
        g.add_scalars(&[l1, real, fake, a]).unwrap()
    });
}

#[test]
fn unreached_parameters_get_no_entry() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
    let b = store.add("b", Tensor::full(&[1, 1, 2, 2], 2.0)).unwrap();
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let bv = g.param(&store, b);
    let _unused = g.tanh(bv);
    let l = g.mean(av);
    let grads = g.backward(l).unwrap();
    assert!(grads.contains(a));
    assert!(!grads.contains(b));
}

#[test]
fn frozen_parameter_forward_matches_but_has_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::full(&[1, 1, 1, 3], 0.5)).unwrap();
    let mut g = Graph::new();
    let f = g.param_frozen(&store, a);
    let t = g.tanh(f);
    let l = g.mean(t);
    assert!((g.value(l).item() - 0.5f64.tanh()).abs() < 1e-15);
    assert!(g.backward(l).unwrap().is_empty());
}

#[test]
fn bce_is_finite_for_extreme_logits() {
    for z in [-1e6f64, -50.0, 0.0, 50.0, 1e6] {
        for y in [0.0, 1.0] {
            assert!(islab_tensor::bce_with_logit(z, y).is_finite());
        }
    }
    assert!((islab_tensor::bce_with_logit(0.0f64, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
}
