//! Operator tests for the differentiation core, checked against direct loop
//! oracles and central differences.

use foregan::diffcore::{grad_check, Tape, Tensor, Var};
use foregan::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Values bounded away from zero so kinks are not straddled by finite differences.
fn random_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05f32..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn eval(f: impl for<'t> FnOnce(&mut Tape<'t>) -> Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).unwrap().clone()
}

fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f32>) {
    let [n, c, h, w] = x.dims4().unwrap();
    let [f, _, kh, kw] = k.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * f * oh * ow];
    for s in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((fo * c + ci) * kh + i) * kw + j];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((s * f + fo) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    (vec![n, f, oh, ow], out)
}

fn assert_close(got: &[f32], want: &[f32], tol: f32) {
    assert_eq!(got.len(), want.len());
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        assert!((a - b).abs() <= tol * b.abs().max(1.0), "index {i}: {a} vs {b}");
    }
}

#[test]
fn dense_sum_identity_and_bias_passthrough() {
    let out = eval(|tp| {
        let x = tp.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tp.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = tp.constant(t(&[1], &[0.0]));
        tp.dense(x, w, b)
    });
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.data(), &[3.0]);

    let out = eval(|tp| {
        let x = tp.constant(t(&[1, 2], &[0.0, 0.0]));
        let w = tp.constant(t(&[2, 1], &[7.0, -3.0]));
        let b = tp.constant(t(&[1], &[5.0]));
        tp.dense(x, w, b)
    });
    assert_eq!(out.data(), &[5.0]);
}

#[test]
fn dense_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[3, 4]);
    let w = random(&mut rng, &[4, 2]);
    let b = random(&mut rng, &[2]);
    let mut want = vec![0.0f32; 6];
    for n in 0..3 {
        for o in 0..2 {
            let mut acc = b.data()[o];
            for i in 0..4 {
                acc += x.data()[n * 4 + i] * w.data()[i * 2 + o];
            }
            want[n * 2 + o] = acc;
        }
    }
    let got = eval(|tp| {
        let (x, w, b) = (tp.constant(x.clone()), tp.constant(w.clone()), tp.constant(b.clone()));
        tp.dense(x, w, b)
    });
    assert_close(got.data(), &want, 1e-6);
}

#[test]
fn dense_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let w = tape.constant(Tensor::zeros(&[4, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    match tape.dense(x, w, b) {
        Err(Error::Dimension(msg)) => {
            assert!(msg.contains("[2, 3]") && msg.contains("[4, 1]"), "{msg}");
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn conv2d_all_ones_and_identity_kernel() {
    let out = eval(|tp| {
        let x = tp.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tp.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        tp.conv2d(x, k, 1, 0)
    });
    assert_eq!(out.shape(), &[1, 1, 1, 1]);
    assert_eq!(out.data(), &[9.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 1, 5, 6]);
    let mut kd = vec![0.0; 9];
    kd[4] = 1.0;
    let out = eval(|tp| {
        let xv = tp.constant(x.clone());
        let k = tp.constant(t(&[1, 1, 3, 3], &kd));
        tp.conv2d(xv, k, 1, 1)
    });
    assert_eq!(out, x);
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[1, 2, 8, 8]);
    let k = random(&mut rng, &[3, 2, 4, 4]);
    let (shape, want) = conv_oracle(&x, &k, 2, 1);
    let got = eval(|tp| {
        let (xv, kv) = (tp.constant(x.clone()), tp.constant(k.clone()));
        tp.conv2d(xv, kv, 2, 1)
    });
    assert_eq!(got.shape(), shape.as_slice());
    assert_eq!(shape, vec![1, 3, 4, 4]);
    assert_close(got.data(), &want, 1e-5);
}

#[test]
fn conv2d_rejects_bad_geometry() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    // (8 - 3) is not divisible by 2.
    assert!(matches!(tape.conv2d(x, k, 2, 0), Err(Error::Dimension(_))));
    let big = tape.constant(Tensor::zeros(&[1, 1, 9, 9]));
    assert!(matches!(tape.conv2d(x, big, 1, 0), Err(Error::Dimension(_))));
    assert!(matches!(tape.conv2d(x, k, 0, 0), Err(Error::Dimension(_))));
    let wrong_c = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(matches!(tape.conv2d(x, wrong_c, 1, 0), Err(Error::Dimension(_))));
}

#[test]
fn conv_transpose_single_pixel_broadcast_and_geometry() {
    let out = eval(|tp| {
        let z = tp.constant(t(&[1, 1, 1, 1], &[2.5]));
        let k = tp.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        tp.conv_transpose2d(z, k, 2, 0)
    });
    assert_eq!(out.shape(), &[1, 1, 4, 4]);
    assert!(out.data().iter().all(|&v| v == 2.5));

    let out = eval(|tp| {
        let z = tp.constant(Tensor::full(&[1, 3, 2, 2], 1.0));
        let k = tp.constant(Tensor::full(&[3, 5, 4, 4], 1.0));
        tp.conv_transpose2d(z, k, 2, 1)
    });
    // (2 - 1)·2 - 2 + 4 = 4
    assert_eq!(out.shape(), &[1, 5, 4, 4]);
}

#[test]
fn conv_transpose_rejects_empty_output() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    // (1 - 1)·2 - 2·1 + 2 = 0
    assert!(matches!(tape.conv_transpose2d(z, k, 2, 1), Err(Error::Dimension(_))));
    assert!(matches!(tape.conv_transpose2d(z, k, 0, 0), Err(Error::Dimension(_))));
}

fn adjoint_gap(
    seed: u64,
    n: usize,
    c: usize,
    f: usize,
    h: usize,
    kern: usize,
    stride: usize,
    pad: usize,
) -> Option<f64> {
    // Pick the conv input extent so the geometry divides exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_h = (h - 1) * stride + kern;
    let in_h = in_h.checked_sub(2 * pad).filter(|&v| v > 0)?;
    let x = random(&mut rng, &[n, c, in_h, in_h]);
    let k = random(&mut rng, &[f, c, kern, kern]);
    let y = random(&mut rng, &[n, f, h, h]);
    let cx = eval(|tp| {
        let (a, b) = (tp.constant(x.clone()), tp.constant(k.clone()));
        tp.conv2d(a, b, stride, pad)
    });
    let ty = eval(|tp| {
        let (a, b) = (tp.constant(y.clone()), tp.constant(k.clone()));
        tp.conv_transpose2d(a, b, stride, pad)
    });
    let lhs = cx.dot(&y).unwrap();
    let rhs = x.dot(&ty).unwrap();
    Some((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12))
}

#[test]
fn conv_pair_is_adjoint() {
    let gap = adjoint_gap(4, 2, 3, 4, 5, 4, 2, 1).unwrap();
    assert!(gap < 1e-4, "{gap}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn conv_pair_adjoint_for_random_geometry(
        seed in any::<u64>(),
        n in 1usize..3,
        c in 1usize..4,
        f in 1usize..4,
        h in 1usize..6,
        kern in 1usize..5,
        stride in 1usize..4,
        pad in 0usize..2,
    ) {
        if let Some(gap) = adjoint_gap(seed, n, c, f, h, kern, stride, pad) {
            prop_assert!(gap < 1e-4, "gap {}", gap);
        }
    }
}

#[test]
fn activation_fixed_points() {
    let out = eval(|tp| {
        let x = tp.constant(t(&[1], &[0.0]));
        tp.tanh(x)
    });
    assert_eq!(out.data(), &[0.0]);
    let out = eval(|tp| {
        let x = tp.constant(t(&[1], &[0.0]));
        tp.sigmoid(x)
    });
    assert_eq!(out.data(), &[0.5]);
    let out = eval(|tp| {
        let x = tp.constant(t(&[1], &[-3.0]));
        tp.relu(x)
    });
    assert_eq!(out.data(), &[0.0]);
    let out = eval(|tp| {
        let x = tp.constant(t(&[1], &[-2.0]));
        tp.leaky_relu(x, 0.2)
    });
    assert!((out.data()[0] + 0.4).abs() < 1e-7);
}

#[test]
fn activation_ranges_hold_at_extremes() {
    let xs = t(&[4], &[-200.0, -30.0, 30.0, 200.0]);
    let s = eval(|tp| {
        let x = tp.constant(xs.clone());
        tp.sigmoid(x)
    });
    assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0), "{:?}", s.data());
    let th = eval(|tp| {
        let x = tp.constant(xs.clone());
        tp.tanh(x)
    });
    assert!(th.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
}

fn weighted<'t>(tp: &mut Tape<'t>, y: Var, w: &Tensor) -> Result<Var> {
    // Σ w·y through dense: [1, n] × [n, 1].
    let n = w.len();
    let flat = tp.reshape(y, &[1, n])?;
    let wv = tp.constant(w.clone().reshape(&[n, 1])?);
    let zero = tp.constant(Tensor::zeros(&[1]));
    let s = tp.dense(flat, wv, zero)?;
    tp.reshape(s, &[1])
}

#[test]
fn activation_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x = random_off_kink(&mut rng, &[12]);
        let w = random(&mut rng, &[12]);
        let checks: [(&str, f32); 4] = [
            (
                "tanh",
                grad_check(
                    |tp, v| {
                        let y = tp.tanh(v)?;
                        weighted(tp, y, &w)
                    },
                    &x,
                    1e-3,
                )
                .unwrap(),
            ),
            (
                "sigmoid",
                grad_check(
                    |tp, v| {
                        let y = tp.sigmoid(v)?;
                        weighted(tp, y, &w)
                    },
                    &x,
                    1e-3,
                )
                .unwrap(),
            ),
            (
                "relu",
                grad_check(
                    |tp, v| {
                        let y = tp.relu(v)?;
                        weighted(tp, y, &w)
                    },
                    &x,
                    1e-3,
                )
                .unwrap(),
            ),
            (
                "leaky_relu",
                grad_check(
                    |tp, v| {
                        let y = tp.leaky_relu(v, 0.2)?;
                        weighted(tp, y, &w)
                    },
                    &x,
                    1e-3,
                )
                .unwrap(),
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-3, "{name}: {err}");
        }
    }
}

#[test]
fn channel_norm_constant_input_and_gamma_zero() {
    let out = eval(|tp| {
        let x = tp.constant(Tensor::full(&[2, 3, 2, 2], 4.0));
        let g = tp.constant(Tensor::full(&[3], 1.0));
        let b = tp.constant(Tensor::zeros(&[3]));
        tp.channel_norm(x, g, b, 1e-5)
    });
    assert!(out.data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[2, 3, 4, 4]);
    let out = eval(|tp| {
        let xv = tp.constant(x.clone());
        let g = tp.constant(Tensor::zeros(&[3]));
        let b = tp.constant(t(&[3], &[0.5, -1.0, 2.0]));
        tp.channel_norm(xv, g, b, 1e-5)
    });
    for (i, v) in out.data().iter().enumerate() {
        let ch = (i / 16) % 3;
        assert_eq!(*v, [0.5, -1.0, 2.0][ch]);
    }
}

#[test]
fn channel_norm_standardizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::from_fn(&[4, 3, 5, 5], |i| rng.random_range(-3.0f32..5.0) + (i % 7) as f32);
    let out = eval(|tp| {
        let xv = tp.constant(x.clone());
        let g = tp.constant(Tensor::full(&[3], 1.0));
        let b = tp.constant(Tensor::zeros(&[3]));
        tp.channel_norm(xv, g, b, 1e-5)
    });
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|s| {
                out.data()[(s * 3 + ch) * 25..(s * 3 + ch + 1) * 25]
                    .iter()
                    .map(|&v| v as f64)
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
    }
}

#[test]
fn channel_norm_rejects_nonpositive_eps() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let g = tape.constant(Tensor::zeros(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.channel_norm(x, g, b, 0.0), Err(Error::Contract(_))));
}

#[test]
fn loss_closed_forms() {
    let out = eval(|tp| {
        let p = tp.constant(t(&[1], &[0.5]));
        tp.bce(p, 1.0)
    });
    assert!((out.data()[0] - std::f32::consts::LN_2).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[1, 1, 64, 64]);
    let same = eval(|tp| {
        let a = tp.constant(x.clone());
        let b = tp.constant(x.clone());
        tp.l1_sum(a, b)
    });
    assert_eq!(same.data(), &[0.0]);

    let y = random(&mut rng, &[1, 1, 64, 64]);
    let mut want = 0.0f64;
    for i in 0..x.len() {
        want += (x.data()[i] as f64 - y.data()[i] as f64).abs();
    }
    let got = eval(|tp| {
        let a = tp.constant(x.clone());
        let b = tp.constant(y.clone());
        tp.l1_sum(a, b)
    });
    assert!((got.data()[0] as f64 - want).abs() < 1e-6 * want);
}

#[test]
fn bce_is_finite_at_saturated_probabilities() {
    let out = eval(|tp| {
        let p = tp.constant(t(&[2], &[0.0, 1.0]));
        tp.bce(p, 1.0)
    });
    assert!(out.data()[0].is_finite() && out.data()[0] > 0.0);
}

#[test]
fn l1_shape_mismatch_is_a_dimension_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[4]));
    let b = tape.constant(Tensor::zeros(&[5]));
    assert!(matches!(tape.l1_sum(a, b), Err(Error::Dimension(_))));
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[5], &[1.0, -2.0, 3.0, 0.5, 9.0]), true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 5]);
}

#[test]
fn backward_of_l1_is_sign() {
    let data = [0.3f32, -1.2, 2.0, -0.01];
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[4], &data), true);
    let zero = tape.constant(Tensor::zeros(&[4]));
    let l = tape.l1_sum(x, zero).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, -1.0, 1.0, -1.0]);

    // Zero residual contributes a zero subgradient.
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[0.0, 1.0]), true);
    let zero = tape.constant(Tensor::zeros(&[2]));
    let l = tape.l1_sum(x, zero).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn gradients_accumulate_over_reuse() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    let y = tape.add(x, x).unwrap();
    let y = tape.add(y, x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0; 3]);
}

#[test]
fn backward_error_paths() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3]), true);
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    let s = tape.sum(x).unwrap();
    tape.clear();
    assert!(tape.is_empty());
    assert!(matches!(tape.backward(s), Err(Error::EmptyTape)));
    assert!(tape.grad(x).is_none());

    let mut other = Tape::new();
    let y = other.leaf(Tensor::zeros(&[1]), true);
    let _ = tape.leaf(Tensor::zeros(&[1]), true);
    assert!(matches!(tape.backward(y), Err(Error::EmptyTape)));
}

fn composite<'t>(tp: &mut Tape<'t>, x: Var, k: &Tensor, target: &Tensor) -> Result<Var> {
    let kv = tp.constant(k.clone());
    let c = tp.conv2d(x, kv, 2, 1)?;
    let a = tp.tanh(c)?;
    let tv = tp.constant(target.clone());
    tp.l1_sum(a, tv)
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[1, 2, 4, 4]);
    let k = random(&mut rng, &[1, 2, 4, 4]);
    // Target outside tanh's range keeps the L1 kink out of reach; the graph is
    // kept small so the f32 loss stays O(1) and central differences resolve it.
    let target = Tensor::full(&[1, 1, 2, 2], 1.5);
    let err = grad_check(|tp, v| composite(tp, v, &k, &target), &x, 1e-3).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x0 = random(&mut rng, &[1, 1, 6, 6]);
    let k = random(&mut rng, &[2, 1, 3, 3]);
    let (a, b) = (0.7f32, -1.3f32);
    let grad_of = |mode: u8| -> Tensor {
        let mut tp = Tape::new();
        let x = tp.leaf(x0.clone(), true);
        let kv = tp.constant(k.clone());
        let c = tp.conv2d(x, kv, 1, 1).unwrap();
        let t1 = tp.tanh(c).unwrap();
        let l1 = tp.sum(t1).unwrap();
        let s2 = tp.sigmoid(c).unwrap();
        let l2 = tp.bce(s2, 1.0).unwrap();
        let loss = match mode {
            0 => l1,
            1 => l2,
            _ => {
                let p = tp.scale(l1, a).unwrap();
                let q = tp.scale(l2, b).unwrap();
                tp.add(p, q).unwrap()
            }
        };
        tp.backward(loss).unwrap();
        tp.grad(x).unwrap().clone()
    };
    let (g1, g2, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gc.len() {
        let want = a * g1.data()[i] + b * g2.data()[i];
        assert!((gc.data()[i] - want).abs() < 1e-5, "{} vs {}", gc.data()[i], want);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[2, 3, 8, 8]);
        let k = random(&mut rng, &[4, 3, 4, 4]);
        eval(|tp| {
            let (xv, kv) = (tp.constant(x.clone()), tp.constant(k.clone()));
            let c = tp.conv2d(xv, kv, 2, 1)?;
            tp.leaky_relu(c, 0.2)
        })
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn requires_grad_propagates_and_constants_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2], 1.0), true);
    let c = tape.constant(Tensor::full(&[2], 2.0));
    let y = tape.add(x, c).unwrap();
    assert!(tape.requires_grad(y).unwrap());
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert!(tape.grad(x).is_some());
}
