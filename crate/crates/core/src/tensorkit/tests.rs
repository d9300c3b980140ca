use super::*;

fn t64(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = RngStream::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.normal()).collect()).unwrap()
}

/// Central-difference check of every parameter element (or `probes` random
/// ones) of `build`'s scalar output.
fn gradcheck<F>(params: &ParamSet<f64>, probes: Option<usize>, build: F) -> f64
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a ParamSet<f64>) -> Var,
{
    let eps = 1e-4;
    let analytic = {
        let mut g = Graph::new(Mode::Train);
        let loss = build(&mut g, params);
        g.backward(loss).unwrap().into_params()
    };
    let eval = |p: &ParamSet<f64>| {
        let mut g = Graph::new(Mode::Train);
        let loss = build(&mut g, p);
        g.value(loss).item()
    };
    let mut coords: Vec<(String, usize)> =
        params.iter().flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i))).collect();
    if let Some(k) = probes {
        let mut r = RngStream::new(99);
        r.shuffle(&mut coords);
        coords.truncate(k);
    }
    let mut worst: f64 = 0.0;
    for (name, i) in coords {
        let mut plus = params.clone();
        plus.get_mut(&name).unwrap().data_mut()[i] += eps;
        let mut minus = params.clone();
        minus.get_mut(&name).unwrap().data_mut()[i] -= eps;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let a = analytic[&name].data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

fn ps(entries: &[(&str, Tensor<f64>)]) -> ParamSet<f64> {
    entries.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

#[test]
fn identity_and_relu_forward() {
    let mut g = Graph::<f32>::new(Mode::Eval);
    let x = g.input(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
    assert_eq!(g.value(x).data(), &[-1.0, 2.0]);
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new(Mode::Eval);
    let x = g.input(Tensor::zeros(&[1, 3]));
    let s = g.softmax(x).unwrap();
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn square_gradient() {
    let p = ps(&[("x", Tensor::scalar(3.0))]);
    let mut g = Graph::new(Mode::Train);
    let x = g.param("x", p.get("x").unwrap());
    let y = g.square(x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.params()["x"].item(), 6.0);
}

#[test]
fn relu_gradient_at_both_signs() {
    for (x0, want) in [(1.0, 1.0), (-1.0, 0.0)] {
        let p = ps(&[("x", Tensor::scalar(x0))]);
        let mut g = Graph::new(Mode::Train);
        let x = g.param("x", p.get("x").unwrap());
        let y = g.relu(x);
        assert_eq!(g.backward(y).unwrap().params()["x"].item(), want);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new(Mode::Train);
    let x = g.input(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(crate::Error::Shape { .. })));
}

#[test]
fn backward_rejects_unevaluated_graph() {
    let g = Graph::<f64>::new(Mode::Train);
    let mut other = Graph::<f64>::new(Mode::Train);
    let x = other.input(Tensor::scalar(1.0));
    assert!(g.backward(x).is_err());
}

#[test]
fn conv_shape_mismatch_is_an_error() {
    let mut g = Graph::<f32>::new(Mode::Eval);
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.input(Tensor::zeros(&[3, 1, 3, 3]));
    let b = g.input(Tensor::zeros(&[3]));
    assert!(g.conv2d(x, w, b, 1, 1).is_err());
}

#[test]
fn conv_matches_direct_summation() {
    let x = t64(&[2, 3, 5, 6], 1);
    let w = t64(&[4, 3, 3, 3], 2);
    let b = t64(&[4], 3);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let mut g = Graph::new(Mode::Eval);
        let (xv, wv, bv) = (g.input_ref(&x), g.input_ref(&w), g.input_ref(&b));
        let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        let out = g.value(y);
        let (ho, wo) = (out.shape()[2], out.shape()[3]);
        for n in 0..2 {
            for co in 0..4 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        continue;
                                    }
                                    acc += x.data()[((n * 3 + ci) * 5 + iy as usize) * 6 + ix as usize]
                                        * w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = out.data()[((n * 4 + co) * ho + oy) * wo + ox];
                        assert!((got - acc).abs() < 1e-10);
                    }
                }
            }
        }
    }
}

#[test]
fn gradcheck_conv_stride_and_padding() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let p = ps(&[
            ("x", t64(&[2, 2, 6, 6], 10)),
            ("w", t64(&[3, 2, k, k], 11)),
            ("b", t64(&[3], 12)),
            ("t", t64(&[2, 3, (6 + 2 * pad - k) / stride + 1, (6 + 2 * pad - k) / stride + 1], 13)),
        ]);
        let err = gradcheck(&p, None, |g, p| {
            let x = g.param("x", p.get("x").unwrap());
            let w = g.param("w", p.get("w").unwrap());
            let b = g.param("b", p.get("b").unwrap());
            let t = g.param("t", p.get("t").unwrap());
            let y = g.conv2d(x, w, b, stride, pad).unwrap();
            let z = g.mul(y, t).unwrap();
            g.sum(z)
        });
        assert!(err < 1e-4, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn gradcheck_dense_relu_mse() {
    let p = ps(&[("x", t64(&[4, 3], 20)), ("w", t64(&[2, 3], 21)), ("b", t64(&[2], 22)), ("t", t64(&[4, 2], 23))]);
    let err = gradcheck(&p, None, |g, p| {
        let x = g.param("x", p.get("x").unwrap());
        let w = g.param("w", p.get("w").unwrap());
        let b = g.param("b", p.get("b").unwrap());
        let t = g.param("t", p.get("t").unwrap());
        let y = g.dense(x, w, b).unwrap();
        let y = g.relu(y);
        g.mse(y, t).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_pool_upsample_concat() {
    let p = ps(&[("x", t64(&[1, 2, 4, 4], 30)), ("u", t64(&[1, 2, 2, 2], 31)), ("t", t64(&[1, 4, 4, 4], 32))]);
    let err = gradcheck(&p, None, |g, p| {
        let x = g.param("x", p.get("x").unwrap());
        let u = g.param("u", p.get("u").unwrap());
        let t = g.param("t", p.get("t").unwrap());
        let pooled = g.max_pool2(x).unwrap();
        let s = g.add(pooled, u).unwrap();
        let up = g.upsample2(s).unwrap();
        let cat = g.concat(&[x, up]).unwrap();
        let z = g.mul(cat, t).unwrap();
        g.sum(z)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_softmax_family_and_scalars() {
    let p = ps(&[("z", t64(&[2, 3, 2, 2], 40)), ("t", t64(&[2, 3, 2, 2], 41))]);
    let labels = [0u32, 1, 2, 1, 2, 2, 0, 1];
    let err = gradcheck(&p, None, |g, p| {
        let z = g.param("z", p.get("z").unwrap());
        let t = g.param("t", p.get("t").unwrap());
        let ce = g.cross_entropy(z, &labels).unwrap();
        let sm = g.softmax(z).unwrap();
        let smt = g.mul(sm, t).unwrap();
        let s1 = g.sum(smt);
        let ls = g.log_softmax(z).unwrap();
        let picked = g.pick(ls, &labels).unwrap();
        let clamped = g.clamp_min(picked, -50.0);
        let s2 = g.mean(clamped);
        let a = g.add(ce, s1).unwrap();
        let d = g.sub(a, s2).unwrap();
        let sq = g.square(d);
        g.scale(sq, 0.5)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_dropout_and_mul_const() {
    let p = ps(&[("x", t64(&[1, 2, 3, 3], 50))]);
    let c = t64(&[1, 2, 3, 3], 51);
    let err = gradcheck(&p, None, |g, p| {
        let x = g.param("x", p.get("x").unwrap());
        let mut r = RngStream::new(5);
        let d = g.dropout(x, 0.3, &mut r).unwrap();
        let m = g.mul_const(d, &c).unwrap();
        g.sum(m)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn cross_entropy_zero_only_for_confident_truth() {
    let mut g = Graph::<f64>::new(Mode::Eval);
    let z = g.input(Tensor::new(vec![1, 2], vec![60.0, -60.0]).unwrap());
    let ce = g.cross_entropy(z, &[0]).unwrap();
    assert!(g.value(ce).item() < 1e-40);
    let ce = g.cross_entropy(z, &[1]).unwrap();
    assert!(g.value(ce).item() > 100.0);
}

#[test]
fn dropout_is_identity_in_eval_mode() {
    let mut g = Graph::<f32>::new(Mode::Eval);
    let x = g.input(Tensor::full(&[1, 1, 4, 4], 1.0));
    let mut r = RngStream::new(0);
    let y = g.dropout(x, 0.5, &mut r).unwrap();
    assert_eq!(x, y);
    assert_eq!(g.flops(), 0);
}

#[test]
fn count_params_of_small_layers() {
    let mut p = ParamSet::<f32>::new();
    let mut r = RngStream::new(0);
    p.init_dense("d", 3, 2, &mut r);
    assert_eq!(p.count(), 8);
    let mut p = ParamSet::<f32>::new();
    p.init_conv("c", 1, 8, 3, &mut r);
    assert_eq!(p.count(), 80);
}

#[test]
fn conv_flops_are_recorded() {
    let x = Tensor::<f32>::zeros(&[1, 1, 32, 32]);
    let w = Tensor::zeros(&[8, 1, 3, 3]);
    let b = Tensor::zeros(&[8]);
    let mut g = Graph::new(Mode::Eval);
    let (xv, wv, bv) = (g.input_ref(&x), g.input_ref(&w), g.input_ref(&b));
    g.conv2d(xv, wv, bv, 1, 1).unwrap();
    assert_eq!(g.flops(), 147_456);
    let before = g.flops();
    let r = g.input(Tensor::zeros(&[100]));
    g.relu(r);
    assert_eq!(g.flops() - before, 100);
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p: ParamSet<f32> = [("a".to_string(), Tensor::full(&[3], 0.7f32))].into_iter().collect();
    let before = p.clone();
    let mut adam = AdamState::new(1e-4);
    let grads = [("a".to_string(), Tensor::zeros(&[3]))].into_iter().collect();
    adam.step(&mut p, &grads).unwrap();
    assert_eq!(p, before);
    assert_eq!(adam.step_count(), 0);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    // t = 1: m̂ = g, v̂ = g², so Δθ = -η g / (|g| + ε) = -η / (1 + 1e-8).
    let mut p: ParamSet<f64> = [("a".to_string(), Tensor::scalar(0.5))].into_iter().collect();
    let mut adam = AdamState::new(1e-4);
    let grads = [("a".to_string(), Tensor::scalar(1.0))].into_iter().collect();
    adam.step(&mut p, &grads).unwrap();
    let delta = p.get("a").unwrap().item() - 0.5;
    assert!((delta + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
    assert_eq!(adam.step_count(), 1);
}

#[test]
fn adam_rejects_missing_or_extra_gradients() {
    let mut p: ParamSet<f32> = [("a".to_string(), Tensor::scalar(0.5))].into_iter().collect();
    let mut adam = AdamState::new(1e-3);
    let extra = [("b".to_string(), Tensor::scalar(1.0))].into_iter().collect();
    assert!(matches!(adam.step(&mut p, &extra), Err(crate::Error::GradientMismatch(_))));
    let none = Default::default();
    assert!(adam.step(&mut p, &none).is_err());
}

#[test]
fn adam_descends_a_parabola() {
    // Scalar reference recurrence, computed independently of AdamState.
    let (lr, b1, b2, eps) = (0.05f64, 0.9f64, 0.999f64, 1e-8);
    let (mut th, mut m, mut v) = (1.0f64, 0.0, 0.0);
    let mut reference = vec![];
    for t in 1..=100 {
        let g = 2.0 * th;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        th -= lr / (1.0 - b1.powi(t)) * m / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        reference.push(th);
    }
    let mut p: ParamSet<f64> = [("a".to_string(), Tensor::scalar(1.0))].into_iter().collect();
    let mut adam = AdamState::new(lr);
    let mut trace = vec![];
    for _ in 0..100 {
        let grads = {
            let mut g = Graph::new(Mode::Train);
            let a = g.param("a", p.get("a").unwrap());
            let l = g.square(a);
            g.backward(l).unwrap().into_params()
        };
        adam.step(&mut p, &grads).unwrap();
        trace.push(p.get("a").unwrap().item());
    }
    for (a, b) in trace.iter().zip(&reference) {
        assert!((a - b).abs() < 1e-12);
    }
    // Monotone approach while far from the minimum.
    for w in trace[..10].windows(2) {
        assert!(w[1].abs() < w[0].abs());
    }
    assert!(trace[99].abs() < 0.5);
}

#[test]
fn identical_seeds_give_identical_training() {
    let run = || {
        let mut r = RngStream::new(7);
        let mut p = ParamSet::<f32>::new();
        p.init_conv("c", 1, 2, 3, &mut r);
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| i as f32 / 16.0).collect()).unwrap();
        let mut adam = AdamState::new(1e-2);
        for step in 0..5 {
            let grads = {
                let mut g = Graph::new(Mode::Train);
                let xv = g.input_ref(&x);
                let w = g.param("c.w", p.get("c.w").unwrap());
                let b = g.param("c.b", p.get("c.b").unwrap());
                let y = g.conv2d(xv, w, b, 1, 1).unwrap();
                let mut dr = r.fork(step);
                let y = g.dropout(y, 0.2, &mut dr).unwrap();
                let l = g.cross_entropy(y, &[1; 16]).unwrap();
                g.backward(l).unwrap().into_params()
            };
            adam.step(&mut p, &grads).unwrap();
        }
        p
    };
    assert_eq!(run(), run());
}
