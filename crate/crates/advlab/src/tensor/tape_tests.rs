//! Tests for the tape, ops, optimizer, and parameter plumbing.
//!
//! Gradient correctness is checked against central finite differences
//! computed by rebuilding the forward pass from scratch — the oracle
//! never touches the backward rules it is checking.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn assert_close(actual: f64, expected: f64, tol: f64, what: &str) {
    let scale = 1.0_f64.max(expected.abs());
    assert!(
        (actual - expected).abs() <= tol * scale,
        "{what}: {actual} vs {expected} (tol {tol})"
    );
}

fn assert_all_close(actual: &[f64], expected: &[f64], tol: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length");
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert_close(*a, *e, tol, &format!("{what}[{i}]"));
    }
}

/// Central finite differences of a scalar function, the independent
/// gradient oracle.
fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += h;
            minus[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Run forward with `build`, backward from its scalar output, and
/// compare the tape gradient of the (single) input against the oracle.
fn check_grad<F>(shape: Vec<usize>, x: Vec<f64>, tol: f64, what: &str, build: F)
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let forward = |vals: &[f64]| {
        let mut tape = Tape::new();
        let v = tape
            .leaf_from_vec(shape.clone(), vals.to_vec(), false)
            .unwrap();
        let out = build(&mut tape, v);
        tape.scalar_value(out)
    };
    let expected = numeric_grad(forward, &x, 1e-5);

    let mut tape = Tape::new();
    let v = tape.leaf_from_vec(shape.clone(), x, true).unwrap();
    let out = build(&mut tape, v);
    tape.backward(out).unwrap();
    let actual = tape.grad(v).expect("input gradient");
    assert_all_close(actual, &expected, tol, what);
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

// ── Forward values pinned by hand ───────────────────────────────────

#[test]
fn matmul_identity_returns_input() {
    let mut tape = Tape::new();
    let a = tape
        .leaf_from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], false)
        .unwrap();
    let eye = tape
        .leaf_from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false)
        .unwrap();
    let out = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_small_known_product() {
    let mut tape = Tape::new();
    let a = tape
        .leaf_from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false)
        .unwrap();
    let b = tape
        .leaf_from_vec(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], false)
        .unwrap();
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(out), &[2, 2]);
    assert_eq!(tape.data(out), &[58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.leaf_from_vec(vec![2], vec![0.0, 0.0], false).unwrap();
    let y = tape.softmax_last(x).unwrap();
    assert_eq!(tape.data(y), &[0.5, 0.5]);
}

#[test]
fn softmax_is_shift_invariant_and_stable() {
    let mut tape = Tape::new();
    let x = tape
        .leaf_from_vec(vec![3], vec![1000.0, 1001.0, 1002.0], false)
        .unwrap();
    let y = tape.softmax_last(x).unwrap();
    let sum: f64 = tape.data(y).iter().sum();
    assert!(tape.data(y).iter().all(|v| v.is_finite()));
    assert_close(sum, 1.0, 1e-12, "softmax sum");
    let mut tape2 = Tape::new();
    let x2 = tape2.leaf_from_vec(vec![3], vec![0.0, 1.0, 2.0], false).unwrap();
    let y2 = tape2.softmax_last(x2).unwrap();
    assert_all_close(tape.data(y), tape2.data(y2), 1e-12, "shift invariance");
}

#[test]
fn conv2d_ones_with_unit_kernel_doubles() {
    let mut tape = Tape::new();
    let x = tape.leaf_from_vec(vec![1, 3, 3], vec![1.0; 9], false).unwrap();
    let w = tape
        .leaf_from_vec(vec![1, 1, 1, 1], vec![2.0], false)
        .unwrap();
    let out = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.shape(out), &[1, 3, 3]);
    assert_eq!(tape.data(out), &[2.0; 9]);
}

#[test]
fn conv2d_matches_naive_reference() {
    // Independent naive convolution used as the forward oracle.
    fn naive(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        (ci, h, wd): (usize, usize, usize),
        (co, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (i * stride + u) as isize - pad as isize;
                                let ix = (j * stride + v) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x[(c * h + iy as usize) * wd + ix as usize]
                                        * w[((o * ci + c) * kh + u) * kw + v];
                                }
                            }
                        }
                    }
                    out[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        out
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (ci, h, wd) = (2, 5, 6);
    let (co, kh, kw) = (3, 3, 3);
    let x = random_vec(&mut rng, ci * h * wd);
    let w = random_vec(&mut rng, co * ci * kh * kw);
    let b = random_vec(&mut rng, co);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let mut tape = Tape::new();
        let xv = tape.leaf_from_vec(vec![ci, h, wd], x.clone(), false).unwrap();
        let wv = tape
            .leaf_from_vec(vec![co, ci, kh, kw], w.clone(), false)
            .unwrap();
        let bv = tape.leaf_from_vec(vec![co], b.clone(), false).unwrap();
        let out = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let expected = naive(&x, &w, &b, (ci, h, wd), (co, kh, kw), stride, pad);
        assert_all_close(
            tape.data(out),
            &expected,
            1e-12,
            &format!("conv stride={stride} pad={pad}"),
        );
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_classes() {
    let mut tape = Tape::new();
    let logits = tape.leaf_from_vec(vec![2], vec![0.0, 0.0], false).unwrap();
    let loss = tape.cross_entropy(logits, &[0]).unwrap();
    assert_close(tape.scalar_value(loss), 2.0_f64.ln(), 1e-12, "ce ln2");
}

#[test]
fn cross_entropy_rejects_bad_class_index() {
    let mut tape = Tape::new();
    let logits = tape.leaf_from_vec(vec![2], vec![0.0, 0.0], false).unwrap();
    let err = tape.cross_entropy(logits, &[2]).unwrap_err();
    assert!(matches!(
        err,
        TensorError::InvalidClassIndex { index: 2, classes: 2 }
    ));
}

#[test]
fn max_pool_keeps_window_maxima() {
    let mut tape = Tape::new();
    #[rustfmt::skip]
    let x = tape.leaf_from_vec(vec![1, 4, 4], vec![
        1.0, 2.0, 5.0, 0.0,
        3.0, 4.0, 1.0, 1.0,
        0.0, 0.0, 2.0, 2.0,
        9.0, 0.0, 2.0, 8.0,
    ], false).unwrap();
    let out = tape.max_pool2d(x, 2).unwrap();
    assert_eq!(tape.shape(out), &[1, 2, 2]);
    assert_eq!(tape.data(out), &[4.0, 5.0, 9.0, 8.0]);
}

#[test]
fn avg_pool_takes_rectangular_window_means() {
    let mut tape = Tape::new();
    #[rustfmt::skip]
    let x = tape.leaf_from_vec(vec![1, 4, 2], vec![
        1.0, 2.0,
        3.0, 4.0,
        0.0, 0.0,
        8.0, 4.0,
    ], false).unwrap();
    let out = tape.avg_pool2d(x, 2, 1).unwrap();
    assert_eq!(tape.shape(out), &[1, 2, 2]);
    assert_eq!(tape.data(out), &[2.0, 3.0, 4.0, 2.0]);
}

#[test]
fn avg_pool_rejects_non_tiling_window() {
    let mut tape = Tape::new();
    let x = tape.leaf_from_vec(vec![1, 4, 4], vec![0.0; 16], false).unwrap();
    let err = tape.avg_pool2d(x, 3, 1).unwrap_err();
    assert!(matches!(err, TensorError::InvalidArgument { op: "avg_pool2d", .. }));
}

// ── Backward values pinned by hand ──────────────────────────────────

#[test]
fn grad_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape
        .leaf_from_vec(vec![3], vec![1.0, 2.0, 3.0], true)
        .unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn grad_of_summed_absolute_error_is_signs() {
    let mut tape = Tape::new();
    let x = tape.leaf_from_vec(vec![2], vec![1.0, -2.0], true).unwrap();
    let zero = tape.leaf_from_vec(vec![2], vec![0.0, 0.0], false).unwrap();
    let loss = tape.l1_sum(x, zero).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.scalar_value(loss), 3.0);
    assert_eq!(tape.grad(x).unwrap(), &[1.0, -1.0]);
}

#[test]
fn shared_subexpressions_accumulate_pathwise() {
    // z = x*x + x  =>  dz/dx = 2x + 1
    let mut tape = Tape::new();
    let x = tape.leaf_from_vec(vec![2], vec![3.0, -1.0], true).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let z = tape.add(sq, x).unwrap();
    let loss = tape.sum(z);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[7.0, -1.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf_from_vec(vec![2], vec![1.0, 2.0], true).unwrap();
    let y = tape.relu(x);
    let err = tape.backward(y).unwrap_err();
    assert!(matches!(err, TensorError::NonScalarRoot { .. }));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf_from_vec(vec![2], vec![1.0, 2.0], true).unwrap();
    let c = tape.leaf_from_vec(vec![2], vec![5.0, 5.0], false).unwrap();
    let y = tape.mul(x, c).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap(), &[5.0, 5.0]);
}

// ── Finite-difference sweeps over every differentiable op ───────────

#[test]
fn fd_elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_vec(&mut rng, 6);
    check_grad(vec![2, 3], x.clone(), 1e-6, "relu+mean", |t, v| {
        let r = t.relu(v);
        t.mean(r)
    });
    check_grad(vec![6], x.clone(), 1e-6, "sigmoid+sum", |t, v| {
        let s = t.sigmoid(v);
        t.sum(s)
    });
    // abs is non-differentiable at 0; the random point avoids 0.
    check_grad(vec![6], x.clone(), 1e-6, "abs+mean", |t, v| {
        let a = t.abs(v);
        t.mean(a)
    });
    check_grad(vec![6], x.clone(), 1e-6, "scalar_mul+sum", |t, v| {
        let s = t.scalar_mul(v, -2.5);
        t.sum(s)
    });
    check_grad(vec![6], x, 1e-6, "mul self + sub + sum", |t, v| {
        let sq = t.mul(v, v).unwrap();
        let d = t.sub(sq, v).unwrap();
        t.sum(d)
    });
}

#[test]
fn fd_add_with_bias_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_vec(&mut rng, 6);
    let bias = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();

    // Gradient w.r.t. the broadcast (bias) side.
    let forward = |vals: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.leaf_from_vec(vec![2, 3], x.clone(), false).unwrap();
        let b = tape.leaf_from_vec(vec![3], vals.to_vec(), false).unwrap();
        let s = tape.add(a, b).unwrap();
        let sq = tape.mul(s, s).unwrap();
        let total = tape.sum(sq);
        tape.scalar_value(total)
    };
    let expected = numeric_grad(forward, bias.data(), 1e-5);

    let mut tape = Tape::new();
    let a = tape.leaf_from_vec(vec![2, 3], x, false).unwrap();
    let b = tape.input(&bias, true);
    let s = tape.add(a, b).unwrap();
    let sq = tape.mul(s, s).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_all_close(tape.grad(b).unwrap(), &expected, 1e-6, "bias grad");
}

#[test]
fn fd_matmul_both_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = random_vec(&mut rng, 2 * 3);
    let b = random_vec(&mut rng, 3 * 4);

    check_grad(vec![2, 3], a.clone(), 1e-6, "matmul lhs", {
        let b = b.clone();
        move |t, v| {
            let bv = t.leaf_from_vec(vec![3, 4], b.clone(), false).unwrap();
            let p = t.matmul(v, bv).unwrap();
            let sq = t.mul(p, p).unwrap();
            t.sum(sq)
        }
    });
    check_grad(vec![3, 4], b, 1e-6, "matmul rhs", {
        let a = a.clone();
        move |t, v| {
            let av = t.leaf_from_vec(vec![2, 3], a.clone(), false).unwrap();
            let p = t.matmul(av, v).unwrap();
            let sq = t.mul(p, p).unwrap();
            t.sum(sq)
        }
    });
}

#[test]
fn fd_conv2d_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (ci, h, w) = (2, 4, 5);
    let (co, kh, kw) = (2, 3, 2);
    let x = random_vec(&mut rng, ci * h * w);
    let wts = random_vec(&mut rng, co * ci * kh * kw);
    let bias = random_vec(&mut rng, co);

    for (stride, pad) in [(1, 1), (2, 1)] {
        // d/dx
        check_grad(vec![ci, h, w], x.clone(), 1e-5, "conv dx", {
            let (wts, bias) = (wts.clone(), bias.clone());
            move |t, v| {
                let wv = t
                    .leaf_from_vec(vec![co, ci, kh, kw], wts.clone(), false)
                    .unwrap();
                let bv = t.leaf_from_vec(vec![co], bias.clone(), false).unwrap();
                let c = t.conv2d(v, wv, Some(bv), stride, pad).unwrap();
                let sq = t.mul(c, c).unwrap();
                t.sum(sq)
            }
        });
        // d/dw
        check_grad(vec![co, ci, kh, kw], wts.clone(), 1e-5, "conv dw", {
            let (x, bias) = (x.clone(), bias.clone());
            move |t, v| {
                let xv = t.leaf_from_vec(vec![ci, h, w], x.clone(), false).unwrap();
                let bv = t.leaf_from_vec(vec![co], bias.clone(), false).unwrap();
                let c = t.conv2d(xv, v, Some(bv), stride, pad).unwrap();
                let sq = t.mul(c, c).unwrap();
                t.sum(sq)
            }
        });
        // d/db
        check_grad(vec![co], bias.clone(), 1e-5, "conv db", {
            let (x, wts) = (x.clone(), wts.clone());
            move |t, v| {
                let xv = t.leaf_from_vec(vec![ci, h, w], x.clone(), false).unwrap();
                let wv = t
                    .leaf_from_vec(vec![co, ci, kh, kw], wts.clone(), false)
                    .unwrap();
                let c = t.conv2d(xv, wv, Some(v), stride, pad).unwrap();
                let sq = t.mul(c, c).unwrap();
                t.sum(sq)
            }
        });
    }
}

#[test]
fn fd_pooling_and_gating() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random_vec(&mut rng, 2 * 4 * 4);
    check_grad(vec![2, 4, 4], x.clone(), 1e-6, "max_pool", |t, v| {
        let p = t.max_pool2d(v, 2).unwrap();
        let sq = t.mul(p, p).unwrap();
        t.sum(sq)
    });
    check_grad(vec![2, 4, 4], x.clone(), 1e-6, "avg_pool", |t, v| {
        let p = t.avg_pool2d(v, 2, 4).unwrap();
        let sq = t.mul(p, p).unwrap();
        t.sum(sq)
    });
    check_grad(vec![2, 4, 4], x.clone(), 1e-6, "global_avg_pool", |t, v| {
        let p = t.global_avg_pool(v).unwrap();
        let sq = t.mul(p, p).unwrap();
        t.sum(sq)
    });
    check_grad(vec![2, 4, 4], x.clone(), 1e-6, "scale_channels dx", |t, v| {
        let g = t.leaf_from_vec(vec![2], vec![0.7, -1.2], false).unwrap();
        let s = t.scale_channels(v, g).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum(sq)
    });
    check_grad(vec![2], vec![0.7, -1.2], 1e-6, "scale_channels dgate", {
        let x = x.clone();
        move |t, v| {
            let xv = t.leaf_from_vec(vec![2, 4, 4], x.clone(), false).unwrap();
            let s = t.scale_channels(xv, v).unwrap();
            let sq = t.mul(s, s).unwrap();
            t.sum(sq)
        }
    });
    check_grad(vec![2, 4, 4], x, 1e-6, "maximum vs const", |t, v| {
        let other = t.leaf_from_vec(vec![2, 4, 4], vec![0.1; 32], false).unwrap();
        let m = t.maximum(v, other).unwrap();
        let sq = t.mul(m, m).unwrap();
        t.sum(sq)
    });
}

#[test]
fn fd_softmax_layernorm_and_ce() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = random_vec(&mut rng, 3 * 4);
    check_grad(vec![3, 4], x.clone(), 1e-6, "softmax", |t, v| {
        let s = t.softmax_last(v).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum(sq)
    });
    check_grad(vec![3, 4], x.clone(), 1e-5, "layer_norm dx", |t, v| {
        let gamma = t
            .leaf_from_vec(vec![4], vec![1.1, 0.9, -0.5, 1.3], false)
            .unwrap();
        let beta = t
            .leaf_from_vec(vec![4], vec![0.1, -0.2, 0.0, 0.4], false)
            .unwrap();
        let n = t.layer_norm(v, gamma, beta, 1e-5).unwrap();
        let sq = t.mul(n, n).unwrap();
        t.sum(sq)
    });
    check_grad(vec![4], vec![1.1, 0.9, -0.5, 1.3], 1e-6, "layer_norm dgamma", {
        let x = x.clone();
        move |t, v| {
            let xv = t.leaf_from_vec(vec![3, 4], x.clone(), false).unwrap();
            let beta = t
                .leaf_from_vec(vec![4], vec![0.1, -0.2, 0.0, 0.4], false)
                .unwrap();
            let n = t.layer_norm(xv, v, beta, 1e-5).unwrap();
            let sq = t.mul(n, n).unwrap();
            t.sum(sq)
        }
    });
    check_grad(vec![3, 4], x.clone(), 1e-6, "cross_entropy batched", |t, v| {
        t.cross_entropy(v, &[1, 3, 0]).unwrap()
    });
    check_grad(vec![4], x[..4].to_vec(), 1e-6, "cross_entropy single", |t, v| {
        t.cross_entropy(v, &[2]).unwrap()
    });
}

#[test]
fn fd_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random_vec(&mut rng, 2 * 6);
    check_grad(vec![2, 6], x.clone(), 1e-6, "transpose", |t, v| {
        let tr = t.transpose(v).unwrap();
        let sq = t.mul(tr, tr).unwrap();
        t.sum(sq)
    });
    check_grad(vec![2, 6], x.clone(), 1e-6, "reshape", |t, v| {
        let r = t.reshape(v, vec![3, 4]).unwrap();
        let sq = t.mul(r, r).unwrap();
        t.sum(sq)
    });
    check_grad(vec![2, 6], x.clone(), 1e-6, "slice", |t, v| {
        let s = t.slice(v, 1, 2, 3).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum(sq)
    });
    check_grad(vec![2, 6], x.clone(), 1e-6, "concat axis0", |t, v| {
        let other = t.leaf_from_vec(vec![1, 6], vec![0.5; 6], false).unwrap();
        let c = t.concat(&[v, other], 0).unwrap();
        let sq = t.mul(c, c).unwrap();
        t.sum(sq)
    });
    check_grad(vec![2, 6], x, 1e-6, "concat axis1 twice", |t, v| {
        let c = t.concat(&[v, v], 1).unwrap();
        let sq = t.mul(c, c).unwrap();
        t.sum(sq)
    });
}

#[test]
fn fd_stack_scalars() {
    let x = vec![0.4, -1.3, 2.2];
    check_grad(vec![3], x, 1e-6, "stack of per-part means", |t, v| {
        let parts: Vec<Var> = (0..3).map(|i| t.slice(v, 0, i, 1).unwrap()).collect();
        let means: Vec<Var> = parts
            .iter()
            .map(|&p| {
                let sq = t.mul(p, p).unwrap();
                t.mean(sq)
            })
            .collect();
        let stacked = t.stack_scalars(&means).unwrap();
        t.mean(stacked)
    });
}

#[test]
fn concat_forward_layout_axis0_and_axis1() {
    let mut tape = Tape::new();
    let a = tape
        .leaf_from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], false)
        .unwrap();
    let b = tape
        .leaf_from_vec(vec![2, 1], vec![9.0, 8.0], false)
        .unwrap();
    let c1 = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c1), &[2, 3]);
    assert_eq!(tape.data(c1), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

    let d = tape
        .leaf_from_vec(vec![1, 2], vec![7.0, 6.0], false)
        .unwrap();
    let c0 = tape.concat(&[a, d], 0).unwrap();
    assert_eq!(tape.shape(c0), &[3, 2]);
    assert_eq!(tape.data(c0), &[1.0, 2.0, 3.0, 4.0, 7.0, 6.0]);
}

#[test]
fn slice_forward_layout() {
    let mut tape = Tape::new();
    let a = tape
        .leaf_from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false)
        .unwrap();
    let s = tape.slice(a, 1, 1, 2).unwrap();
    assert_eq!(tape.shape(s), &[2, 2]);
    assert_eq!(tape.data(s), &[2.0, 3.0, 5.0, 6.0]);
    let r = tape.slice(a, 0, 1, 1).unwrap();
    assert_eq!(tape.shape(r), &[1, 3]);
    assert_eq!(tape.data(r), &[4.0, 5.0, 6.0]);
}

// ── Optimizer ───────────────────────────────────────────────────────

#[test]
fn sgd_momentum_matches_hand_computation() {
    // v <- 0.9 v + g, p <- p - 0.1 v with g = 1 twice:
    // step 1: v = 1,   p = -0.1
    // step 2: v = 1.9, p = -0.1 - 0.19 = -0.29
    let mut params = ParamSet::new();
    params.insert("p", Tensor::new(vec![1], vec![0.0]).unwrap());
    let mut opt = SgdMomentum::new(0.1, 0.9);

    params.get_mut("p").unwrap().set_grad(vec![1.0]).unwrap();
    opt.step(&mut params).unwrap();
    assert_close(params.get("p").unwrap().data()[0], -0.1, 1e-12, "step 1");

    params.get_mut("p").unwrap().set_grad(vec![1.0]).unwrap();
    opt.step(&mut params).unwrap();
    assert_close(params.get("p").unwrap().data()[0], -0.29, 1e-12, "step 2");
}

#[test]
fn sgd_step_errors_on_missing_gradient() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::zeros(vec![2]));
    let mut opt = SgdMomentum::new(0.1, 0.0);
    let err = opt.step(&mut params).unwrap_err();
    assert!(matches!(err, TensorError::MissingGradient { name } if name == "w"));
}

#[test]
fn gradient_descent_minimizes_quadratic() {
    // loss(p) = (p - 3)^2 has its minimum at p = 3.
    let mut params = ParamSet::new();
    params.insert("p", Tensor::new(vec![1], vec![0.0]).unwrap());
    let mut opt = SgdMomentum::new(0.1, 0.0);
    for _ in 0..100 {
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &params, true);
        let p = vars.var("p");
        let target = tape.leaf_from_vec(vec![1], vec![3.0], false).unwrap();
        let d = tape.sub(p, target).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        params.clear_grads();
        sync_grads(&tape, &vars, &mut params).unwrap();
        opt.step(&mut params).unwrap();
    }
    assert_close(params.get("p").unwrap().data()[0], 3.0, 1e-6, "argmin");
}

#[test]
fn batch_mean_grads_averages_in_index_order() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());

    // Per-example loss: w . x_i with x_i = [i, 2i]  =>  grad_i = x_i.
    let grads = |_: &ParamSet, i: usize| {
        let x = [i as f64, 2.0 * i as f64];
        let mut g = std::collections::BTreeMap::new();
        g.insert("w".to_string(), x.to_vec());
        Ok((x[0] + x[1], g))
    };
    let loss = batch_mean_grads(&mut params, 4, grads).unwrap();
    // mean over i = 0..4 of 3i = 4.5; mean grad = [1.5, 3.0]
    assert_close(loss, 4.5, 1e-12, "mean loss");
    assert_all_close(
        params.get("w").unwrap().grad().unwrap(),
        &[1.5, 3.0],
        1e-12,
        "mean grad",
    );
}

// ── Parameter plumbing ──────────────────────────────────────────────

#[test]
fn bind_and_sync_round_trip() {
    let mut params = ParamSet::new();
    params.insert("a", Tensor::new(vec![2], vec![2.0, -3.0]).unwrap());
    params.insert("b", Tensor::new(vec![1], vec![0.5]).unwrap());

    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &params, true);
    let a = vars.var("a");
    let b = vars.var("b");
    let prod = tape.mul(a, a).unwrap();
    let total = tape.sum(prod);
    let b_total = tape.sum(b);
    let loss = tape.add(total, b_total).unwrap();
    tape.backward(loss).unwrap();
    params.clear_grads();
    sync_grads(&tape, &vars, &mut params).unwrap();

    assert_eq!(params.get("a").unwrap().grad().unwrap(), &[4.0, -6.0]);
    assert_eq!(params.get("b").unwrap().grad().unwrap(), &[1.0]);
}

#[test]
fn frozen_bind_leaves_no_grads() {
    let mut params = ParamSet::new();
    params.insert("a", Tensor::new(vec![2], vec![2.0, -3.0]).unwrap());
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &params, false);
    let a = vars.var("a");
    let sq = tape.mul(a, a).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert!(tape.grad(a).is_none());
    let err = sync_grads(&tape, &vars, &mut params).unwrap_err();
    assert!(matches!(err, TensorError::MissingGradient { .. }));
}

#[test]
fn prefix_merge_and_extract_are_inverse() {
    let mut inner = ParamSet::new();
    inner.insert("w", Tensor::zeros(vec![2]));
    inner.insert("layer.b", Tensor::zeros(vec![3]));
    let mut outer = ParamSet::new();
    outer.insert("head", Tensor::zeros(vec![1]));
    outer.merge_prefixed("encoder", inner.clone());

    assert!(outer.contains("encoder.w"));
    assert!(outer.contains("encoder.layer.b"));
    assert_eq!(outer.extract_prefixed("encoder"), inner);
    assert_eq!(outer.numel(), 6);
}
