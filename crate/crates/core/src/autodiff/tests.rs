use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Central finite differences of a scalar function, the independent oracle
/// used to check every analytic gradient.
fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

fn assert_grad_close(analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1.0);
        assert!(
            (a - n).abs() / denom < 1e-4,
            "gradient mismatch at {i}: analytic={a} numeric={n}"
        );
    }
}

/// Run a graph builder both to get the analytic gradient of `x` and through
/// the finite-difference oracle.
fn check_gradient<F>(x: &[f64], shape: &[usize], mut build: F)
where
    F: FnMut(&mut Tape, NodeId) -> NodeId,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(shape, x, true);
    let loss = build(&mut tape, leaf);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(leaf).unwrap().to_vec();

    let mut f = |vals: &[f64]| {
        let mut t = Tape::new();
        let leaf = t.leaf(shape, vals, true);
        let loss = build(&mut t, leaf);
        t.scalar_value(loss)
    };
    let numeric = finite_diff(&mut f, x, 1e-5);
    assert_grad_close(&analytic, &numeric);
}

/// Finite-difference oracle for graphs containing gradient reversals with a
/// shared coefficient: the reversed-path gradient equals
/// `(1+c)*FD(detached) - c*FD(identity)`.
fn check_gradient_with_grl<F>(x: &[f64], shape: &[usize], coefficient: f64, mut build: F)
where
    F: FnMut(&mut Tape, NodeId) -> NodeId,
{
    let mut tape = Tape::new();
    tape.record_grl_inputs(true);
    let leaf = tape.leaf(shape, x, true);
    let loss = build(&mut tape, leaf);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(leaf).unwrap().to_vec();
    let recorded = tape.recorded_grl_inputs().to_vec();

    let mut f_frozen = |vals: &[f64]| {
        let mut t = Tape::new();
        t.set_grl_mode(GrlMode::Replay);
        t.preload_grl_inputs(recorded.clone());
        let leaf = t.leaf(shape, vals, true);
        let loss = build(&mut t, leaf);
        t.scalar_value(loss)
    };
    let d_frozen = finite_diff(&mut f_frozen, x, 1e-5);
    let mut f_ident = |vals: &[f64]| {
        let mut t = Tape::new();
        t.set_grl_mode(GrlMode::Identity);
        let leaf = t.leaf(shape, vals, true);
        let loss = build(&mut t, leaf);
        t.scalar_value(loss)
    };
    let d_ident = finite_diff(&mut f_ident, x, 1e-5);
    let numeric: Vec<f64> = d_frozen
        .iter()
        .zip(&d_ident)
        .map(|(df, di)| (1.0 + coefficient) * df - coefficient * di)
        .collect();
    assert_grad_close(&analytic, &numeric);
}

#[test]
fn grad_reverse_forward_is_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[2], &[1.0, -2.0], true);
    let y = tape.grad_reverse(x, 0.01).unwrap();
    assert_eq!(tape.values(y), &[1.0, -2.0]);
}

#[test]
fn grad_reverse_negates_and_scales() {
    let xv = [0.3, -1.2, 2.5];
    let mut tape = Tape::new();
    let x = tape.leaf(&[3], &xv, true);
    let r = tape.grad_reverse(x, 0.5).unwrap();
    let loss = tape.sum(r).unwrap();
    tape.backward(loss).unwrap();
    for &g in tape.grad(x).unwrap() {
        assert_abs_diff_eq!(g, -0.5, epsilon = 1e-12);
    }
    // The same composition through the finite-difference oracle.
    check_gradient_with_grl(&xv, &[3], 0.5, |t, leaf| {
        let r = t.grad_reverse(leaf, 0.5).unwrap();
        t.sum(r).unwrap()
    });
    // A reversal feeding a nonlinear head, still against the oracle.
    check_gradient_with_grl(&xv, &[3], 0.25, |t, leaf| {
        let r = t.grad_reverse(leaf, 0.25).unwrap();
        let s = t.sigmoid(r).unwrap();
        let d = t.constant(&[3], &[1.0, 0.0, 1.0]);
        t.binary_cross_entropy(s, d).unwrap()
    });
}

#[test]
fn grad_reverse_twice_scales_by_positive_product() {
    let xv = [0.7, -0.4];
    let mut tape = Tape::new();
    let x = tape.leaf(&[2], &xv, true);
    let r1 = tape.grad_reverse(x, 0.5).unwrap();
    let r2 = tape.grad_reverse(r1, 0.2).unwrap();
    let loss = tape.sum(r2).unwrap();
    tape.backward(loss).unwrap();
    for &g in tape.grad(x).unwrap() {
        assert_abs_diff_eq!(g, 0.5 * 0.2, epsilon = 1e-12);
    }
}

#[test]
fn grad_reverse_rejects_non_positive_coefficient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[1], &[1.0], true);
    assert!(matches!(
        tape.grad_reverse(x, 0.0),
        Err(AdError::NonPositiveCoefficient(_))
    ));
    assert!(tape.grad_reverse(x, -1.0).is_err());
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[2], &[1.0, 2.0], true);
    let d = tape.detach(x).unwrap();
    let loss = tape.sum(d).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).is_none());
    assert_eq!(tape.values(d), &[1.0, 2.0]);
}

#[test]
fn bce_uniform_prediction_is_ln2() {
    let mut tape = Tape::new();
    let p = tape.leaf(&[1], &[0.5], true);
    let d = tape.constant(&[1], &[1.0]);
    let loss = tape.binary_cross_entropy(p, d).unwrap();
    assert_abs_diff_eq!(tape.scalar_value(loss), std::f64::consts::LN_2, epsilon = 1e-12);
}

#[test]
fn bce_perfect_prediction_is_near_zero() {
    let mut tape = Tape::new();
    let p = tape.leaf(&[1], &[1.0 - 1e-7], true);
    let d = tape.constant(&[1], &[1.0]);
    let loss = tape.binary_cross_entropy(p, d).unwrap();
    let v = tape.scalar_value(loss);
    assert!(v >= 0.0 && v < 1e-6, "got {v}");
}

#[test]
fn bce_matches_scalar_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let preds: Vec<f64> = (0..8).map(|_| rng.gen_range(0.02..0.98)).collect();
    let labels: Vec<f64> = (0..8).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();

    // Independent scalar loop.
    let mut expected = 0.0;
    for (&p, &d) in preds.iter().zip(&labels) {
        let pc = p.clamp(1e-7, 1.0 - 1e-7);
        expected += -(d * pc.ln() + (1.0 - d) * (1.0 - pc).ln());
    }

    let mut tape = Tape::new();
    let p = tape.leaf(&[8], &preds, true);
    let d = tape.constant(&[8], &labels);
    let loss = tape.binary_cross_entropy(p, d).unwrap();
    assert_abs_diff_eq!(tape.scalar_value(loss), expected, epsilon = 1e-12);

    check_gradient(&preds, &[8], |t, leaf| {
        let d = t.constant(&[8], &labels);
        t.binary_cross_entropy(leaf, d).unwrap()
    });
}

#[test]
fn bce_shape_mismatch_errors() {
    let mut tape = Tape::new();
    let p = tape.leaf(&[2], &[0.5, 0.5], true);
    let d = tape.constant(&[3], &[1.0, 0.0, 1.0]);
    assert!(matches!(
        tape.binary_cross_entropy(p, d),
        Err(AdError::ShapeMismatch { .. })
    ));
}

#[test]
fn bce_masked_matches_loop_and_zeroes_dropped_items() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let preds: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.95)).collect();
    let labels: Vec<f64> = (0..12).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let mask: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();

    let mut expected = 0.0;
    for i in 0..12 {
        if mask[i] == 0.0 {
            continue;
        }
        let pc = preds[i].clamp(1e-7, 1.0 - 1e-7);
        expected += -(labels[i] * pc.ln() + (1.0 - labels[i]) * (1.0 - pc).ln());
    }

    let mut tape = Tape::new();
    let p = tape.leaf(&[12], &preds, true);
    let loss = tape.bce_masked(p, labels.clone(), mask.clone()).unwrap();
    assert_abs_diff_eq!(tape.scalar_value(loss), expected, epsilon = 1e-12);
    tape.backward(loss).unwrap();
    let grad = tape.grad(p).unwrap();
    for (i, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            assert_eq!(grad[i], 0.0, "masked item {i} leaked gradient");
        } else {
            assert!(grad[i] != 0.0);
        }
    }
}

#[test]
fn smooth_l1_branch_values() {
    let cases = [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)];
    for (x, expected) in cases {
        let mut tape = Tape::new();
        let p = tape.leaf(&[1], &[x], true);
        let t = tape.constant(&[1], &[0.0]);
        let loss = tape.smooth_l1(p, t).unwrap();
        assert_abs_diff_eq!(tape.scalar_value(loss), expected, epsilon = 1e-12);
    }
}

#[test]
fn smooth_l1_gradient_matches_oracle() {
    let pred = [0.3, -0.7, 2.5, -3.0];
    let target = [0.0, 0.1, 0.2, 0.3];
    check_gradient(&pred, &[4], |t, leaf| {
        let tgt = t.constant(&[4], &target);
        t.smooth_l1(leaf, tgt).unwrap()
    });
}

#[test]
fn conv2d_identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let xn = tape.leaf(&[1, 1, 5, 5], &x, true);
    let k = tape.constant(&[1, 1, 1, 1], &[1.0]);
    let y = tape.conv2d(xn, k, 1, 0).unwrap();
    assert_eq!(tape.values(y), &x[..]);
}

#[test]
fn conv2d_matches_quadruple_loop_oracle() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
    let k = [1.0, -1.0, 0.5, 2.0];
    // Direct cross-correlation oracle, stride 1 pad 0.
    let mut expected = [0.0; 4];
    for oy in 0..2 {
        for ox in 0..2 {
            let mut acc = 0.0;
            for ky in 0..2 {
                for kx in 0..2 {
                    acc += x[(oy + ky) * 3 + (ox + kx)] * k[ky * 2 + kx];
                }
            }
            expected[oy * 2 + ox] = acc;
        }
    }
    let mut tape = Tape::new();
    let xn = tape.leaf(&[1, 1, 3, 3], &x, true);
    let kn = tape.leaf(&[1, 1, 2, 2], &k, true);
    let y = tape.conv2d(xn, kn, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    for (a, e) in tape.values(y).iter().zip(&expected) {
        assert_abs_diff_eq!(a, e, epsilon = 1e-12);
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x: Vec<f64> = (0..2 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..3 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

    // Gradient w.r.t. the kernel.
    let mut f = |kv: &[f64]| {
        let mut t = Tape::new();
        let xn = t.constant(&[1, 2, 6, 6], &x);
        let kn = t.leaf(&[3, 2, 3, 3], kv, true);
        let y = t.conv2d(xn, kn, 2, 1).unwrap();
        let s = t.sum(y).unwrap();
        t.scalar_value(s)
    };
    let numeric = finite_diff(&mut f, &k, 1e-5);
    let mut tape = Tape::new();
    let xn = tape.constant(&[1, 2, 6, 6], &x);
    let kn = tape.leaf(&[3, 2, 3, 3], &k, true);
    let y = tape.conv2d(xn, kn, 2, 1).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_grad_close(tape.grad(kn).unwrap(), &numeric);

    // Gradient w.r.t. the input.
    check_gradient(&x, &[1, 2, 6, 6], |t, leaf| {
        let kn = t.constant(&[3, 2, 3, 3], &k);
        let y = t.conv2d(leaf, kn, 2, 1).unwrap();
        t.sum(y).unwrap()
    });
}

#[test]
fn conv2d_rejects_incompatible_channels() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[1, 2, 4, 4], &vec![0.0; 32], true);
    let k = tape.leaf(&[1, 3, 3, 3], &vec![0.0; 27], true);
    assert!(tape.conv2d(x, k, 1, 0).is_err());
}

#[test]
fn max_pool_forward_and_gradient() {
    let x = [1.0, 3.0, 2.0, 0.0, 5.0, 4.0, 7.0, 6.0, 8.0];
    let mut tape = Tape::new();
    let xn = tape.leaf(&[1, 1, 3, 3], &x, true);
    let y = tape.max_pool2d(xn, 2, 1).unwrap();
    assert_eq!(tape.values(y), &[5.0, 5.0, 7.0, 8.0]);
    check_gradient(&x, &[1, 1, 3, 3], |t, leaf| {
        let y = t.max_pool2d(leaf, 2, 1).unwrap();
        t.sum(y).unwrap()
    });
}

#[test]
fn matmul_matches_naive_loop_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut expected = vec![0.0; 8];
    for i in 0..2 {
        for j in 0..4 {
            for p in 0..3 {
                expected[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
            }
        }
    }
    let mut tape = Tape::new();
    let an = tape.leaf(&[2, 3], &a, true);
    let bn = tape.leaf(&[3, 4], &b, true);
    let y = tape.matmul(an, bn).unwrap();
    for (got, want) in tape.values(y).iter().zip(&expected) {
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    check_gradient(&a, &[2, 3], |t, leaf| {
        let bn = t.constant(&[3, 4], &b);
        let y = t.matmul(leaf, bn).unwrap();
        t.sum(y).unwrap()
    });
    check_gradient(&b, &[3, 4], |t, leaf| {
        let an = t.constant(&[2, 3], &a);
        let y = t.matmul(an, leaf).unwrap();
        t.sum(y).unwrap()
    });
}

#[test]
fn elementwise_and_reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x: Vec<f64> = (0..10).map(|_| rng.gen_range(0.2..2.0)).collect();
    let other: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();

    check_gradient(&x, &[10], |t, leaf| {
        let o = t.constant(&[10], &other);
        let m = t.mul(leaf, o).unwrap();
        let a = t.add(m, leaf).unwrap();
        let s = t.sub(a, o).unwrap();
        let sc = t.scale(s, 1.7).unwrap();
        t.mean(sc).unwrap()
    });

    // Fan-out: the same node used twice accumulates both contributions.
    let mut tape = Tape::new();
    let xn = tape.leaf(&[1], &[3.0], true);
    let sq = tape.mul(xn, xn).unwrap();
    tape.backward(sq).unwrap();
    assert_abs_diff_eq!(tape.grad(xn).unwrap()[0], 6.0, epsilon = 1e-12);
}

#[test]
fn product_rule_and_sum_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[1], &[3.0], true);
    let y = tape.leaf(&[1], &[4.0], true);
    let p = tape.mul(x, y).unwrap();
    tape.backward(p).unwrap();
    assert_abs_diff_eq!(tape.grad(x).unwrap()[0], 4.0, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.grad(y).unwrap()[0], 3.0, epsilon = 1e-12);

    let mut tape = Tape::new();
    let x = tape.leaf(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0], true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 5]);
}

#[test]
fn relu_sigmoid_reshape_gather_concat_gradients() {
    let x = [0.6, -0.8, 1.4, -2.0, 0.9, 2.2];
    check_gradient(&x, &[6], |t, leaf| {
        let r = t.relu(leaf).unwrap();
        let s = t.sigmoid(r).unwrap();
        let rs = t.reshape(s, &[2, 3]).unwrap();
        let g = t.gather(rs, vec![0, 2, 4]).unwrap();
        let c = t.concat_rows(&[g, g]).unwrap();
        t.sum(c).unwrap()
    });
}

#[test]
fn bias_gradients() {
    let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 1.0).collect();
    let b = [0.5, -0.25, 0.75];
    check_gradient(&b, &[3], |t, leaf| {
        let xn = t.constant(&[2, 3], &x);
        let y = t.add_row_bias(xn, leaf).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.sum(sq).unwrap()
    });

    let xc: Vec<f64> = (0..2 * 2 * 2 * 2).map(|i| i as f64 * 0.1).collect();
    let bc = [0.4, -0.6];
    check_gradient(&bc, &[2], |t, leaf| {
        let xn = t.constant(&[2, 2, 2, 2], &xc);
        let y = t.add_channel_bias(xn, leaf).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.sum(sq).unwrap()
    });
}

#[test]
fn softmax_cross_entropy_matches_manual_loop() {
    let logits = [1.0, 2.0, 0.5, -0.5, 0.0, 3.0];
    let classes = [1usize, 2usize];
    let mut expected = 0.0;
    for (row, &cls) in classes.iter().enumerate() {
        let r = &logits[row * 3..(row + 1) * 3];
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + r.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        expected += lse - r[cls];
    }
    let mut tape = Tape::new();
    let l = tape.leaf(&[2, 3], &logits, true);
    let loss = tape.softmax_cross_entropy(l, &classes).unwrap();
    assert_abs_diff_eq!(tape.scalar_value(loss), expected, epsilon = 1e-12);

    check_gradient(&logits, &[2, 3], |t, leaf| {
        t.softmax_cross_entropy(leaf, &classes).unwrap()
    });
}

#[test]
fn mini_discriminator_gradients_match_finite_differences() {
    // conv -> relu -> flatten -> linear -> sigmoid -> bce: the smallest
    // realistic head, checked on every parameter.
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let img: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let kernel: Vec<f64> = (0..4 * 2 * 3 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let w: Vec<f64> = (0..16 * 1).map(|_| rng.gen_range(-0.5..0.5)).collect();

    let build = |t: &mut Tape, kn: NodeId, wn: NodeId| {
        let xn = t.constant(&[1, 2, 4, 4], &img);
        let c = t.conv2d(xn, kn, 2, 1).unwrap();
        let r = t.relu(c).unwrap();
        let flat = t.reshape(r, &[1, 16]).unwrap();
        let logit = t.matmul(flat, wn).unwrap();
        let p = t.sigmoid(logit).unwrap();
        let d = t.constant(&[1, 1], &[1.0]);
        t.binary_cross_entropy(p, d).unwrap()
    };

    let mut tape = Tape::new();
    let kn = tape.leaf(&[4, 2, 3, 3], &kernel, true);
    let wn = tape.leaf(&[16, 1], &w, true);
    let loss = build(&mut tape, kn, wn);
    tape.backward(loss).unwrap();
    let dk = tape.grad(kn).unwrap().to_vec();
    let dw = tape.grad(wn).unwrap().to_vec();

    let mut fk = |kv: &[f64]| {
        let mut t = Tape::new();
        let kn = t.leaf(&[4, 2, 3, 3], kv, true);
        let wn = t.leaf(&[16, 1], &w, true);
        let l = build(&mut t, kn, wn);
        t.scalar_value(l)
    };
    assert_grad_close(&dk, &finite_diff(&mut fk, &kernel, 1e-5));

    let mut fw = |wv: &[f64]| {
        let mut t = Tape::new();
        let kn = t.leaf(&[4, 2, 3, 3], &kernel, true);
        let wn = t.leaf(&[16, 1], wv, true);
        let l = build(&mut t, kn, wn);
        t.scalar_value(l)
    };
    assert_grad_close(&dw, &finite_diff(&mut fw, &w, 1e-5));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[2], &[1.0, 2.0], true);
    assert!(matches!(tape.backward(x), Err(AdError::NonScalarLoss(_))));
}

#[test]
fn non_finite_forward_is_a_hard_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(&[1], &[1e308], true);
    let b = tape.leaf(&[1], &[1e308], true);
    assert!(matches!(tape.mul(a, b), Err(AdError::NonFinite { .. })));
}

#[test]
fn identical_seed_and_op_sequence_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..2 * 3 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let xn = tape.leaf(&[1, 3, 2, 2], &x, true);
        let kn = tape.leaf(&[2, 3, 2, 2], &k, true);
        let y = tape.conv2d(xn, kn, 1, 1).unwrap();
        let s = tape.sigmoid(y).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        (
            tape.values(loss).to_vec(),
            tape.grad(xn).unwrap().to_vec(),
            tape.grad(kn).unwrap().to_vec(),
        )
    };
    let (v1, gx1, gk1) = run();
    let (v2, gx2, gk2) = run();
    assert_eq!(v1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               v2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(gx1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               gx2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(gk1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               gk2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn sgd_zero_grad_zero_velocity_leaves_params_unchanged() {
    let mut params = Params::new();
    let id = params
        .add("w", Tensor::new(vec![2], vec![1.0, -2.0], true))
        .unwrap();
    params.tensor_mut(id).grad = Some(vec![0.0, 0.0]);
    let mut opt = OptimizerState::new(0.1, 0.9, 0.0, &params).unwrap();
    opt.step(&mut params).unwrap();
    assert_eq!(params.tensor(id).values, vec![1.0, -2.0]);
}

#[test]
fn sgd_single_step_hand_formula() {
    let mut params = Params::new();
    let id = params.add("w", Tensor::new(vec![1], vec![0.5], true)).unwrap();
    params.tensor_mut(id).grad = Some(vec![1.0]);
    let mut opt = OptimizerState::new(0.1, 0.9, 0.0, &params).unwrap();
    opt.step(&mut params).unwrap();
    assert_abs_diff_eq!(params.tensor(id).values[0], 0.4, epsilon = 1e-15);
    // Gradient cleared after the step.
    assert!(params.tensor(id).grad.is_none());
}

#[test]
fn sgd_two_steps_match_hand_stepped_oracle() {
    let (lr, mom, wd) = (0.05, 0.9, 0.01);
    let (g1, g2) = (0.7, -0.3);
    // Hand-stepped scalar oracle.
    let mut p = 1.5;
    let mut v = 0.0;
    for g in [g1, g2] {
        v = mom * v + g + wd * p;
        p -= lr * v;
    }

    let mut params = Params::new();
    let id = params.add("w", Tensor::new(vec![1], vec![1.5], true)).unwrap();
    let mut opt = OptimizerState::new(lr, mom, wd, &params).unwrap();
    params.tensor_mut(id).grad = Some(vec![g1]);
    opt.step(&mut params).unwrap();
    params.tensor_mut(id).grad = Some(vec![g2]);
    opt.step(&mut params).unwrap();
    assert_abs_diff_eq!(params.tensor(id).values[0], p, epsilon = 1e-15);
}

#[test]
fn sgd_missing_gradient_is_an_error() {
    let mut params = Params::new();
    params.add("w", Tensor::new(vec![1], vec![0.5], true)).unwrap();
    let mut opt = OptimizerState::new(0.1, 0.9, 0.0, &params).unwrap();
    assert!(matches!(
        opt.step(&mut params),
        Err(AdError::MissingGradient(_))
    ));
}

#[test]
fn params_bind_and_harvest_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = Params::new();
    let w = params
        .add("w", Tensor::new(vec![4], uniform_fan_in(&mut rng, 4, 4), true))
        .unwrap();
    let mut tape = Tape::new();
    let binds = params.bind_all(&mut tape);
    let loss = tape.sum(binds[w.0]).unwrap();
    tape.backward(loss).unwrap();
    params.harvest_grads(&tape, &binds);
    assert_eq!(params.tensor(w).grad.as_deref().unwrap(), &[1.0; 4]);
}
