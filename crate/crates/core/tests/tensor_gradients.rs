//! Correctness evidence for the tensor engine: an independent brute-force
//! convolution reference and finite-difference gradient checks per op.

use lumipower_core::gradcheck::{check_gradients, sample_away_from_kink, sample_uniform, GradCheckConfig};
use lumipower_core::tensor::{Tape, TensorId};
use proptest::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Six nested loops straight from the definition of a batched
/// cross-correlation. Shares no code with the im2col path it checks.
#[allow(clippy::too_many_arguments)]
fn conv2d_naive(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * cin + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv_forward_matches_naive_reference() {
    let mut r = rng(11);
    let x: Vec<f64> = sample_uniform(&mut r, 2 * 3 * 8 * 8);
    let k: Vec<f64> = sample_uniform(&mut r, 4 * 3 * 3 * 3);
    let b: Vec<f64> = sample_uniform(&mut r, 4);
    let want = conv2d_naive(&x, (2, 3, 8, 8), &k, (4, 3, 3), Some(&b), 2, 1);

    let mut t = Tape::<f64>::new();
    let xi = t.leaf(x, &[2, 3, 8, 8], false).unwrap();
    let ki = t.leaf(k, &[4, 3, 3, 3], false).unwrap();
    let bi = t.leaf(b, &[4], false).unwrap();
    let y = t.conv2d(xi, ki, Some(bi), 2, 1).unwrap();
    assert_eq!(t.shape(y), &[2, 4, 4, 4]);
    for (got, want) in t.data(y).iter().zip(&want) {
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }
}

#[test]
fn conv_forward_matches_naive_across_geometries() {
    // Mix of strides, pads, kernel sizes, and the 1x1 fast path.
    let cases = [
        (1, 1, 6, 6, 2, 3, 3, 1, 1),
        (2, 2, 7, 5, 3, 3, 3, 2, 1),
        (1, 4, 8, 8, 2, 1, 1, 1, 0),
        (2, 1, 9, 9, 1, 7, 7, 2, 3),
        (1, 2, 5, 8, 3, 2, 4, 3, 2),
    ];
    for (ci, case) in cases.iter().enumerate() {
        let &(n, cin, h, w, cout, kh, kw, stride, pad) = case;
        let mut r = rng(100 + ci as u64);
        let x = sample_uniform(&mut r, n * cin * h * w);
        let k = sample_uniform(&mut r, cout * cin * kh * kw);
        let want = conv2d_naive(&x, (n, cin, h, w), &k, (cout, kh, kw), None, stride, pad);
        let mut t = Tape::<f64>::new();
        let xi = t.leaf(x, &[n, cin, h, w], false).unwrap();
        let ki = t.leaf(k, &[cout, cin, kh, kw], false).unwrap();
        let y = t.conv2d(xi, ki, None, stride, pad).unwrap();
        for (got, want) in t.data(y).iter().zip(&want) {
            assert!((got - want).abs() < 1e-12, "case {ci}: got {got}, want {want}");
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut r = rng(21);
    let leaves = vec![
        (sample_uniform(&mut r, 2 * 2 * 6 * 6), vec![2, 2, 6, 6]),
        (sample_uniform(&mut r, 3 * 2 * 3 * 3), vec![3, 2, 3, 3]),
        (sample_uniform(&mut r, 3), vec![3]),
    ];
    let report = check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
        let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    })
    .unwrap();
    assert!(report.checked_elements > 0);
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut r = rng(22);
    let leaves = vec![
        (sample_uniform(&mut r, 4 * 6), vec![4, 6]),
        (sample_uniform(&mut r, 3 * 6), vec![3, 6]),
        (sample_uniform(&mut r, 3), vec![3]),
    ];
    check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
        let y = t.linear(ids[0], ids[1], Some(ids[2]))?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    })
    .unwrap();
}

#[test]
fn relu_and_abs_gradients_away_from_kink() {
    // Elements are kept at least 0.1 from zero so the centered difference
    // never straddles the corner.
    let mut r = rng(23);
    let vals = sample_away_from_kink(&mut r, 24, 0.1);
    let leaves = vec![(vals, vec![24usize])];
    check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
        let a = t.relu(ids[0])?;
        t.sum(a)
    })
    .unwrap();
    let mut r = rng(24);
    let vals = sample_away_from_kink(&mut r, 24, 0.1);
    let leaves = vec![(vals, vec![24usize])];
    check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
        let a = t.abs(ids[0])?;
        let s = t.sum(a)?;
        t.scale(s, -1.0)
    })
    .unwrap();
}

#[test]
fn batchnorm_training_gradients_match_finite_differences() {
    let mut r = rng(25);
    let leaves = vec![
        (sample_uniform(&mut r, 2 * 3 * 4 * 4), vec![2, 3, 4, 4]),
        (sample_uniform(&mut r, 3).iter().map(|v| v + 1.5).collect(), vec![3usize]),
        (sample_uniform(&mut r, 3), vec![3]),
    ];
    check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
        // Fresh running buffers each call; the training-mode output does not
        // read them, so the side effect is irrelevant to the check.
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let y = t.batch_norm2d(ids[0], ids[1], ids[2], &mut rm, &mut rv, 0.1, 1e-5, true)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    })
    .unwrap();
}

#[test]
fn batchnorm_eval_gradients_match_finite_differences() {
    let mut r = rng(26);
    let leaves = vec![
        (sample_uniform(&mut r, 2 * 2 * 3 * 3), vec![2, 2, 3, 3]),
        (sample_uniform(&mut r, 2), vec![2usize]),
        (sample_uniform(&mut r, 2), vec![2]),
    ];
    check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
        let mut rm = vec![0.3, -0.2];
        let mut rv = vec![1.7, 0.6];
        let y = t.batch_norm2d(ids[0], ids[1], ids[2], &mut rm, &mut rv, 0.1, 1e-5, false)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    })
    .unwrap();
}

#[test]
fn pool_pad_and_reductions_match_finite_differences() {
    let mut r = rng(27);
    // Max pool: distinct values so the argmax is stable under +-h.
    let mut vals: Vec<f64> = (0..2 * 2 * 4 * 4).map(|i| i as f64 * 0.37).collect();
    vals.shuffle(&mut r);
    let leaves = vec![(vals, vec![2, 2, 4, 4])];
    check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
        let p = t.max_pool2x2(ids[0])?;
        let sq = t.mul(p, p)?;
        t.sum(sq)
    })
    .unwrap();

    let leaves = vec![(sample_uniform(&mut r, 2 * 3 * 2 * 2), vec![2, 3, 2, 2])];
    check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
        let p = t.global_avg_pool(ids[0])?;
        let sq = t.mul(p, p)?;
        t.sum(sq)
    })
    .unwrap();

    let leaves = vec![(sample_uniform(&mut r, 1 * 2 * 3 * 3), vec![1, 2, 3, 3])];
    check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
        let p = t.pad2d(ids[0], 2)?;
        let sq = t.mul(p, p)?;
        t.sum(sq)
    })
    .unwrap();

    let leaves = vec![(sample_uniform(&mut r, 3 * 4), vec![3, 4])];
    check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
        let s = t.sum_axis(ids[0], 1)?;
        let sq = t.mul(s, s)?;
        t.sum(sq)
    })
    .unwrap();
}

#[test]
fn composite_graph_gradients_match_finite_differences() {
    // Two convs with a batchnorm, relu, pooling and a linear head: the same
    // building blocks the real model chains together.
    let mut r = rng(28);
    let leaves = vec![
        (sample_uniform(&mut r, 1 * 1 * 8 * 8), vec![1, 1, 8, 8]),
        (sample_uniform(&mut r, 2 * 1 * 3 * 3), vec![2, 1, 3, 3]),
        (sample_uniform(&mut r, 2).iter().map(|v| v + 1.2).collect(), vec![2usize]),
        (sample_uniform(&mut r, 2), vec![2]),
        (sample_uniform(&mut r, 2 * 2 * 3 * 3), vec![2, 2, 3, 3]),
        (sample_uniform(&mut r, 1 * 2), vec![1, 2]),
    ];
    check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let c1 = t.conv2d(ids[0], ids[1], None, 2, 1)?;
        let b1 = t.batch_norm2d(c1, ids[2], ids[3], &mut rm, &mut rv, 0.1, 1e-5, true)?;
        let r1 = t.relu(b1)?;
        let c2 = t.conv2d(r1, ids[4], None, 1, 1)?;
        let p = t.max_pool2x2(c2)?;
        let e = t.global_avg_pool(p)?;
        let y = t.linear(e, ids[5], None)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    })
    .unwrap();
}

#[test]
fn two_consumer_gradient_matches_perturbation_oracle() {
    let mut r = rng(29);
    let leaves = vec![(sample_uniform(&mut r, 6), vec![6usize])];
    check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
        // x feeds two branches; its gradient is the sum of both.
        let sq = t.mul(ids[0], ids[0])?;
        let s1 = t.sum(sq)?;
        let s2 = t.sum(ids[0])?;
        let s2 = t.scale(s2, 0.5)?;
        t.add(s1, s2)
    })
    .unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape_follows_the_formula(
        n in 1usize..3, cin in 1usize..3, cout in 1usize..4,
        h in 3usize..10, w in 3usize..10,
        kh in 1usize..4, kw in 1usize..4,
        stride in 1usize..3, pad in 0usize..3,
    ) {
        prop_assume!(h + 2 * pad >= kh && w + 2 * pad >= kw);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![0.5; n * cin * h * w], &[n, cin, h, w], false).unwrap();
        let k = t.leaf(vec![0.1; cout * cin * kh * kw], &[cout, cin, kh, kw], false).unwrap();
        let y = t.conv2d(x, k, None, stride, pad).unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        prop_assert_eq!(t.shape(y), &[n, cout, oh, ow]);
    }

    #[test]
    fn summing_both_axes_equals_full_sum(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let mut r = rng(seed);
        let vals = sample_uniform(&mut r, rows * cols);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vals, &[rows, cols], false).unwrap();
        let by_axis = {
            let s1 = t.sum_axis(x, 1).unwrap();
            let s0 = t.sum(s1).unwrap();
            t.data(s0)[0]
        };
        let direct = {
            let s = t.sum(x).unwrap();
            t.data(s)[0]
        };
        prop_assert!((by_axis - direct).abs() < 1e-12);
    }

    #[test]
    fn reshape_preserves_data(seed in 0u64..1000) {
        let mut r = rng(seed);
        let vals = sample_uniform(&mut r, 12);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vals.clone(), &[3, 4], false).unwrap();
        let y = t.reshape(x, &[2, 2, 3]).unwrap();
        prop_assert_eq!(t.data(y), &vals[..]);
    }
}
