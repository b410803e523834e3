use cskd::tensor::{grad_check, softmax_last, Graph, Tensor, Var};
use cskd::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;
const OP_TOL: f64 = 1e-6;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for piecewise-linear ops.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces any output to a scalar with fixed pseudo-random weights so every
/// output coordinate contributes a distinct gradient.
fn weighted(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(g.shape(y), |i| ((i as f64) * 0.7361).sin() + 0.3);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(name: &str, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>, x: &Tensor<f64>) {
    let err = grad_check(f, x, 1e-4).unwrap();
    assert!(err < OP_TOL, "{name}: max relative error {err:e}");
}

fn trials(seed: u64, mut body: impl FnMut(&mut ChaCha8Rng)) {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + trial);
        body(&mut rng);
    }
}

// ---- examples ----

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let id = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let y = g.matmul(id, m).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.matmul(a, m).unwrap();
    assert_eq!(g.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);

    let bad = g.constant(Tensor::zeros(&[3, 2]));
    match g.matmul(a, bad) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 2]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.conv2d(x, one, 1, 0).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let ones = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.conv2d(x, ones, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 10.0);

    let x4 = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let y = g.conv2d(x4, ones, 2, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);

    let k3 = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x4, k3, 2, 0), Err(Error::Config(_))));
}

#[test]
fn conv2d_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 3, 5, 5]);
    let k = random(&mut rng, &[4, 3, 3, 3]);
    let (stride, pad) = (2, 1);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(xv, kv, stride, pad).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), &[2, 4, 3, 3]);
    for b in 0..2 {
        for o in 0..4 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += x.at(&[b, c, iy as usize, ix as usize]) * k.at(&[o, c, ky, kx]);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[b, o, oy, ox]) - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn avg_pool2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.avg_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);

    let c = g.constant(Tensor::full(&[2, 3, 4, 4], 1.75));
    let y = g.avg_pool2d(c, 2, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 1.75));

    let y = g.avg_pool2d(x, 1, 1).unwrap();
    assert_eq!(g.value(y), g.value(x));

    assert!(matches!(g.avg_pool2d(x, 3, 1), Err(Error::Config(_))));
}

#[test]
fn avg_pool2d_matches_window_mean_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = Tensor::from_fn(&[2, 3, 6, 6], |_| f64::from(rng.random_range(-50i32..50)));
        for (k, s) in [(2, 2), (3, 3), (2, 1), (3, 1)] {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = g.avg_pool2d(xv, k, s).unwrap();
            let y = g.value(y);
            let o = (6 - k) / s + 1;
            for b in 0..2 {
                for c in 0..3 {
                    for oy in 0..o {
                        for ox in 0..o {
                            let mut sum = 0.0;
                            for dy in 0..k {
                                for dx in 0..k {
                                    sum += x.at(&[b, c, oy * s + dy, ox * s + dx]);
                                }
                            }
                            assert_eq!(y.at(&[b, c, oy, ox]), sum * (1.0 / (k * k) as f64));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn global_avg_pool_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2, 1, 1], &[3.0, -4.0]));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2]);
    assert_eq!(g.value(y).data(), &[3.0, -4.0]);

    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);

    let x = g.constant(Tensor::full(&[2, 2, 3, 3], -0.5));
    let y = g.global_avg_pool(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v + 0.5).abs() < 1e-15));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::full(&[2], 1.0));
    let zeros = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[1, 2], &[4.0, 4.0]));
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);

    let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
    let y = g.value(y).data();
    assert!((y[0] + 1.0).abs() < 1e-10 && (y[1] - 1.0).abs() < 1e-10);

    let gain0 = g.constant(Tensor::zeros(&[2]));
    let bias = g.constant(t(&[2], &[0.25, -2.0]));
    let y = g.layer_norm(x, gain0, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, -2.0]);

    assert!(matches!(g.layer_norm(x, ones, zeros, 0.0), Err(Error::Config(_))));
}

#[test]
fn softmax_ce_examples() {
    let mut g = Graph::new();
    let u = g.constant(Tensor::full(&[3, 7], 0.3));
    let l = g.softmax_ce(u, &[0, 3, 6]).unwrap();
    assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);

    let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = g.softmax_ce(z, &[0]).unwrap();
    assert!((g.value(l).item() - 0.693147).abs() < 1e-6);

    let big = g.constant(t(&[1, 2], &[100.0, 0.0]));
    let l = g.softmax_ce(big, &[0]).unwrap();
    assert!(g.value(l).item() < 1e-6);

    assert!(matches!(g.softmax_ce(z, &[2]), Err(Error::Label { label: 2, classes: 2 })));
}

#[test]
fn kl_div_temperature_examples() {
    let mut g = Graph::new();
    let s = g.leaf(t(&[2, 3], &[0.1, 0.5, -0.2, 1.0, 2.0, 3.0]), true);
    let same = g.constant(t(&[2, 3], &[0.1, 0.5, -0.2, 1.0, 2.0, 3.0]));
    let l = g.kl_div_temperature(s, same, 2.0).unwrap();
    assert!(g.value(l).item().abs() < 1e-15);

    let st = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let te = g.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
    let l = g.kl_div_temperature(st, te, 1.0).unwrap();
    // Direct formula: p = [0.25, 0.75], q = [0.5, 0.5].
    let want = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
    assert!((g.value(l).item() - want).abs() < 1e-12);
    assert!((want - 0.130812).abs() < 1e-6);

    assert!(matches!(g.kl_div_temperature(st, te, 0.0), Err(Error::Config(_))));
    assert!(matches!(g.kl_div_temperature(st, te, -1.0), Err(Error::Config(_))));
}

#[test]
fn kl_div_teacher_gradient_is_zero() {
    let mut g = Graph::new();
    let s = g.leaf(t(&[2, 3], &[0.1, 0.5, -0.2, 1.0, 2.0, 3.0]), true);
    let te = g.leaf(t(&[2, 3], &[1.0, -0.5, 0.0, 0.0, 0.3, -3.0]), true);
    let l = g.kl_div_temperature(s, te, 1.5).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(te).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.get(s).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2, 3, 4], 0.7), true);
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let sq = g.mul(x, x).unwrap();
    let grads = g.backward(sq).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn fan_out_gradients_accumulate() {
    // loss = sum(x * x) + sum(3x): gradient 2x + 3.
    let x = t(&[4], &[0.5, -1.0, 2.0, 0.0]);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let sq = g.mul(xv, xv).unwrap();
    let f = g.sum(sq).unwrap();
    let lin = g.scale(xv, 3.0).unwrap();
    let h = g.sum(lin).unwrap();
    let loss = g.add(f, h).unwrap();
    let grads = g.backward(loss).unwrap();
    let gx = grads.get(xv).unwrap();
    for (gv, xv) in gx.data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv + 3.0);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let x = Tensor::from_fn(&[5, 11], |_| rng.random_range(-30.0..30.0));
        let y = softmax_last(&x);
        for row in y.data().chunks(11) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn finite_checks_flag_nan() {
    let mut g = Graph::new().with_finite_checks(true);
    let x = g.constant(t(&[1], &[f64::NAN]));
    assert!(matches!(g.scale(x, 2.0), Err(Error::Numeric(_))));
}

// ---- gradient checks, >= 20 randomized trials per op ----

#[test]
fn grad_check_sum_is_exact() {
    trials(1, |rng| {
        let x = random(rng, &[3, 4]);
        let err = grad_check(|g, x| g.sum(x), &x, 1e-4).unwrap();
        assert!(err < 1e-10, "{err:e}");
    });
}

#[test]
fn grad_check_matmul_and_bmm() {
    trials(2, |rng| {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let a = random(rng, &[m, k]);
        let b = random(rng, &[k, n]);
        let bc = b.clone();
        check("matmul/a", move |g, x| {
            let b = g.constant(bc.clone());
            let y = g.matmul(x, b)?;
            weighted(g, y)
        }, &a);
        let ac = a.clone();
        check("matmul/b", move |g, x| {
            let a = g.constant(ac.clone());
            let y = g.matmul(a, x)?;
            weighted(g, y)
        }, &b);

        let a3 = random(rng, &[2, m, k]);
        let b3 = random(rng, &[2, k, n]);
        let bc = b3.clone();
        check("bmm/a", move |g, x| {
            let b = g.constant(bc.clone());
            let y = g.bmm(x, b)?;
            weighted(g, y)
        }, &a3);
        let ac = a3.clone();
        check("bmm/b", move |g, x| {
            let a = g.constant(ac.clone());
            let y = g.bmm(a, x)?;
            weighted(g, y)
        }, &b3);
    });
}

#[test]
fn grad_check_elementwise() {
    trials(3, |rng| {
        let x = random(rng, &[2, 3, 2]);
        let other = random(rng, &[2, 3, 2]);
        let suffix = random(rng, &[3, 2]);
        let o = other.clone();
        check("add", move |g, x| {
            let c = g.constant(o.clone());
            let y = g.add(x, c)?;
            weighted(g, y)
        }, &x);
        let o = other.clone();
        check("mul", move |g, x| {
            let c = g.constant(o.clone());
            let y = g.mul(x, c)?;
            weighted(g, y)
        }, &x);
        let s = suffix.clone();
        check("add_broadcast/x", move |g, x| {
            let c = g.constant(s.clone());
            let y = g.add_broadcast(x, c)?;
            weighted(g, y)
        }, &x);
        let xc = x.clone();
        check("add_broadcast/y", move |g, y| {
            let c = g.constant(xc.clone());
            let out = g.add_broadcast(c, y)?;
            weighted(g, out)
        }, &suffix);
        check("scale", |g, x| {
            let y = g.scale(x, -1.7)?;
            weighted(g, y)
        }, &x);
        check("mean", |g, x| g.mean(x), &x);
        check("gelu", |g, x| {
            let y = g.gelu(x)?;
            weighted(g, y)
        }, &x);
        let xr = random_off_zero(rng, &[2, 3, 2]);
        check("relu", |g, x| {
            let y = g.relu(x)?;
            weighted(g, y)
        }, &xr);
    });
}

#[test]
fn grad_check_layout_ops() {
    trials(4, |rng| {
        let x = random(rng, &[2, 3, 4]);
        check("reshape", |g, x| {
            let y = g.reshape(x, &[6, 4])?;
            weighted(g, y)
        }, &x);
        check("permute", |g, x| {
            let y = g.permute(x, &[2, 0, 1])?;
            weighted(g, y)
        }, &x);
        check("narrow", |g, x| {
            let y = g.narrow(x, 1, 1, 2)?;
            weighted(g, y)
        }, &x);
        let other = random(rng, &[2, 2, 4]);
        check("concat", move |g, x| {
            let c = g.constant(other.clone());
            let y = g.concat(&[c, x, c], 1)?;
            weighted(g, y)
        }, &x);
        check("repeat_batch", |g, x| {
            let y = g.repeat_batch(x, 3)?;
            weighted(g, y)
        }, &x);
    });
}

#[test]
fn grad_check_softmax_and_norms() {
    trials(5, |rng| {
        let x = random(rng, &[3, 5]);
        check("softmax", |g, x| {
            let y = g.softmax(x)?;
            weighted(g, y)
        }, &x);

        let gain = random(rng, &[5]);
        let bias = random(rng, &[5]);
        let (gc, bc) = (gain.clone(), bias.clone());
        check("layer_norm/x", move |g, x| {
            let (gv, bv) = (g.constant(gc.clone()), g.constant(bc.clone()));
            let y = g.layer_norm(x, gv, bv, 1e-5)?;
            weighted(g, y)
        }, &x);
        let (xc, bc) = (x.clone(), bias.clone());
        check("layer_norm/gain", move |g, gain| {
            let (xv, bv) = (g.constant(xc.clone()), g.constant(bc.clone()));
            let y = g.layer_norm(xv, gain, bv, 1e-5)?;
            weighted(g, y)
        }, &gain);
        let (xc, gc) = (x.clone(), gain.clone());
        check("layer_norm/bias", move |g, bias| {
            let (xv, gv) = (g.constant(xc.clone()), g.constant(gc.clone()));
            let y = g.layer_norm(xv, gv, bias, 1e-5)?;
            weighted(g, y)
        }, &bias);

        let img = random(rng, &[2, 3, 2, 2]);
        let gamma = random(rng, &[3]);
        let beta = random(rng, &[3]);
        let (gc, bc) = (gamma.clone(), beta.clone());
        check("batch_norm_train/x", move |g, x| {
            let (gv, bv) = (g.constant(gc.clone()), g.constant(bc.clone()));
            let (y, _, _) = g.batch_norm2d_train(x, gv, bv, 1e-5)?;
            weighted(g, y)
        }, &img);
        let (ic, bc) = (img.clone(), beta.clone());
        check("batch_norm_train/gamma", move |g, gamma| {
            let (xv, bv) = (g.constant(ic.clone()), g.constant(bc.clone()));
            let (y, _, _) = g.batch_norm2d_train(xv, gamma, bv, 1e-5)?;
            weighted(g, y)
        }, &gamma);
        let mean = [0.1, -0.2, 0.3];
        let var = [0.5, 1.5, 0.9];
        let (gc, bc) = (gamma.clone(), beta.clone());
        check("batch_norm_eval/x", move |g, x| {
            let (gv, bv) = (g.constant(gc.clone()), g.constant(bc.clone()));
            let y = g.batch_norm2d_eval(x, gv, bv, &mean, &var, 1e-5)?;
            weighted(g, y)
        }, &img);
        let (ic, gc) = (img.clone(), gamma.clone());
        check("batch_norm_eval/beta", move |g, beta| {
            let (xv, gv) = (g.constant(ic.clone()), g.constant(gc.clone()));
            let y = g.batch_norm2d_eval(xv, gv, beta, &mean, &var, 1e-5)?;
            weighted(g, y)
        }, &beta);
    });
}

#[test]
fn grad_check_spatial_ops() {
    trials(6, |rng| {
        let x = random(rng, &[2, 2, 4, 4]);
        let k = random(rng, &[3, 2, 3, 3]);
        let kc = k.clone();
        check("conv2d/input", move |g, x| {
            let kv = g.constant(kc.clone());
            let y = g.conv2d(x, kv, 1, 1)?;
            weighted(g, y)
        }, &x);
        let xc = x.clone();
        check("conv2d/kernel", move |g, k| {
            let xv = g.constant(xc.clone());
            let y = g.conv2d(xv, k, 1, 0)?;
            weighted(g, y)
        }, &k);
        let x5 = random(rng, &[1, 2, 5, 5]);
        let kc = k.clone();
        check("conv2d/stride2", move |g, x| {
            let kv = g.constant(kc.clone());
            let y = g.conv2d(x, kv, 2, 1)?;
            weighted(g, y)
        }, &x5);
        check("avg_pool2d", |g, x| {
            let y = g.avg_pool2d(x, 2, 2)?;
            weighted(g, y)
        }, &x);
        check("global_avg_pool", |g, x| {
            let y = g.global_avg_pool(x)?;
            weighted(g, y)
        }, &x);
        let kc = k.clone();
        check("conv2d+pool", move |g, x| {
            let kv = g.constant(kc.clone());
            let y = g.conv2d(x, kv, 1, 1)?;
            let y = g.avg_pool2d(y, 2, 2)?;
            weighted(g, y)
        }, &x);
    });
}

#[test]
fn grad_check_losses() {
    trials(7, |rng| {
        let logits = random(rng, &[4, 5]).map(|v| 3.0 * v);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let tg = targets.clone();
        check("softmax_ce", move |g, x| g.softmax_ce(x, &tg), &logits);

        let w = random(rng, &[3, 5]);
        let tg = targets.clone();
        check("linear+softmax_ce", move |g, x| {
            let wv = g.constant(w.clone());
            let h = g.matmul(x, wv)?;
            g.softmax_ce(h, &tg)
        }, &random(rng, &[4, 3]));

        let teacher = random(rng, &[4, 5]).map(|v| 2.0 * v);
        let temp = rng.random_range(0.5..4.0);
        check("kl_div_temperature", move |g, x| {
            let t = g.constant(teacher.clone());
            g.kl_div_temperature(x, t, temp)
        }, &logits);
    });
}

#[test]
fn grad_check_linear() {
    trials(8, |rng| {
        let x = random(rng, &[2, 3, 4]);
        let w = random(rng, &[4, 5]);
        let b = random(rng, &[5]);
        let (wc, bc) = (w.clone(), b.clone());
        check("linear/x", move |g, x| {
            let (wv, bv) = (g.constant(wc.clone()), g.constant(bc.clone()));
            let y = g.linear(x, wv, bv)?;
            weighted(g, y)
        }, &x);
        let (xc, bc) = (x.clone(), b.clone());
        check("linear/w", move |g, w| {
            let (xv, bv) = (g.constant(xc.clone()), g.constant(bc.clone()));
            let y = g.linear(xv, w, bv)?;
            weighted(g, y)
        }, &w);
    });
}

#[test]
fn grad_check_accepts_structurally_zero_gradients() {
    // Shifting every logit of a row by the same amount leaves cross-entropy unchanged.
    trials(9, |rng| {
        let logits = random(rng, &[4, 6]).map(|v| 4.0 * v);
        let shift = random(rng, &[4, 1]);
        let err = grad_check(
            move |g, x| {
                let ones = g.constant(Tensor::full(&[1, 6], 1.0));
                let s = g.matmul(x, ones)?;
                let l = g.constant(logits.clone());
                let y = g.add(l, s)?;
                g.softmax_ce(y, &[0, 1, 2, 3])
            },
            &shift,
            1e-5,
        )
        .unwrap();
        assert!(err < OP_TOL, "{err:e}");
    });
}

#[test]
fn grad_check_flags_a_kink() {
    // relu at exactly 0: one-sided analytic slope against a central difference of 1/2.
    let err = grad_check(|g, x| {
        let y = g.relu(x)?;
        g.sum(y)
    }, &t(&[1], &[0.0]), 1e-4)
    .unwrap();
    assert!(err > 0.4, "{err}");
}
