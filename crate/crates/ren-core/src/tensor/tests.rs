use super::*;

fn graph32() -> Graph<f32> {
    Graph::new()
}

fn graph64() -> Graph<f64> {
    Graph::new()
}

#[test]
fn conv2d_all_ones_3x3_pad1() {
    let mut g = graph32();
    let x = g.leaf(vec![1.0; 9], &[1, 1, 3, 3], false).unwrap();
    let w = g.leaf(vec![1.0; 9], &[1, 1, 3, 3], false).unwrap();
    let b = g.leaf(vec![0.0], &[1], false).unwrap();
    let y = g.conv2d(x, w, b, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    assert_eq!(g.values(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv2d_identity_kernel() {
    let mut g = graph32();
    let vals: Vec<f32> = (0..30).map(|i| i as f32 * 0.5 - 3.0).collect();
    let x = g.leaf(vals.clone(), &[1, 2, 3, 5], false).unwrap();
    let w = g.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1], false).unwrap();
    let b = g.leaf(vec![0.0, 0.0], &[2], false).unwrap();
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    // identity mixing matrix on channels reproduces the input
    assert_eq!(g.values(y), vals.as_slice());
}

#[test]
fn conv_pool_stack_reaches_12x12x64() {
    // six 3x3 'same' convolutions and three 2x2 poolings: 96 -> 12
    let mut g = graph32();
    let mut rng = RngStream::new(1);
    let x = g
        .leaf((0..96 * 96).map(|_| rng.uniform() as f32).collect(), &[1, 1, 96, 96], false)
        .unwrap();
    let widths = [(16, 1), (16, 16), (32, 16), (32, 32), (64, 32), (64, 64)];
    let mut cur = x;
    for (i, &(oc, ic)) in widths.iter().enumerate() {
        let w = g.leaf(vec![0.01; oc * ic * 9], &[oc, ic, 3, 3], false).unwrap();
        let b = g.leaf(vec![0.0; oc], &[oc], false).unwrap();
        cur = g.conv2d(cur, w, b, 1, 1).unwrap();
        cur = g.relu(cur);
        if i % 2 == 1 {
            cur = g.maxpool2d(cur, 2, 2).unwrap();
        }
    }
    assert_eq!(g.shape(cur), &[1, 64, 12, 12]);
}

#[test]
fn conv2d_channel_mismatch_names_dimension() {
    let mut g = graph32();
    let x = g.leaf(vec![0.0; 3 * 4 * 4], &[1, 3, 4, 4], false).unwrap();
    let w = g.leaf(vec![0.0; 2 * 4 * 9], &[2, 4, 3, 3], false).unwrap();
    let b = g.leaf(vec![0.0; 2], &[2], false).unwrap();
    match g.conv2d(x, w, b, 1, 1) {
        Err(TensorError::DimMismatch { dimension, expected, got, .. }) => {
            assert_eq!(dimension, "input channels");
            assert_eq!((expected, got), (4, 3));
        }
        other => panic!("expected DimMismatch, got {other:?}"),
    }
}

#[test]
fn maxpool_window_and_backward_routing() {
    let mut g = graph32();
    let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2], true).unwrap();
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.values(y), &[4.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn maxpool_constant_window_first_max_wins() {
    let mut g = graph32();
    let x = g.leaf(vec![7.0; 16], &[1, 1, 4, 4], true).unwrap();
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.values(y), &[7.0; 4]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    // ties route to the first cell of each window in row-major order
    let grad = g.grad(x).unwrap();
    let expected = [
        1.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 0.0, //
        1.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 0.0,
    ];
    assert_eq!(grad, &expected);
}

#[test]
fn maxpool_window_exceeding_bounds_errors() {
    let mut g = graph32();
    let x = g.leaf(vec![0.0; 4], &[1, 1, 2, 2], false).unwrap();
    assert!(matches!(g.maxpool2d(x, 3, 1), Err(TensorError::WindowOutOfBounds { .. })));
}

#[test]
fn relu_values_and_gradient() {
    let mut g = graph32();
    let x = g.leaf(vec![-1.0, 0.0, 2.0], &[3], true).unwrap();
    let y = g.relu(x);
    assert_eq!(g.values(y), &[0.0, 0.0, 2.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    // subgradient at exactly zero is zero
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn relu_all_negative_is_zero_everywhere() {
    let mut g = graph32();
    let x = g.leaf(vec![-3.0, -0.5, -1e-6], &[3], true).unwrap();
    let y = g.relu(x);
    assert_eq!(g.values(y), &[0.0; 3]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);
}

#[test]
fn relu_linear_region_passes_upstream() {
    let mut g = graph32();
    let x = g.leaf(vec![3.0], &[1], true).unwrap();
    let y = g.relu(x);
    let scaled = g.scale(y, 5.0); // upstream gradient of 5
    let s = g.sum(scaled);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[5.0]);
}

#[test]
fn linear_identity_weight() {
    let mut g = graph32();
    let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], false).unwrap();
    let w = g
        .leaf(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3], false)
        .unwrap();
    let b = g.leaf(vec![0.0; 3], &[3], false).unwrap();
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.values(y), g.values(x));
}

#[test]
fn linear_hand_matmul() {
    let mut g = graph32();
    let x = g.leaf(vec![1.0, 2.0], &[1, 2], false).unwrap();
    let w = g.leaf(vec![3.0, 4.0], &[1, 2], false).unwrap();
    let b = g.leaf(vec![5.0], &[1], false).unwrap();
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.values(y), &[16.0]);
}

#[test]
fn linear_region_width_shape() {
    // a 6x6x64 region flattened feeds a 2048-wide layer
    let mut g = graph32();
    let x = g.leaf(vec![0.0; 2304], &[1, 2304], false).unwrap();
    let w = g.leaf(vec![0.0; 2048 * 2304], &[2048, 2304], false).unwrap();
    let b = g.leaf(vec![0.0; 2048], &[2048], false).unwrap();
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.shape(y), &[1, 2048]);
}

#[test]
fn dropout_rate_zero_and_inference_are_identity() {
    let vals = vec![0.5, -1.5, 2.0, 0.0];
    for (rate, training) in [(0.0, true), (0.0, false), (0.5, false)] {
        let mut g = graph32();
        let mut rng = RngStream::new(3);
        let x = g.leaf(vals.clone(), &[4], false).unwrap();
        let y = g.dropout(x, rate, training, &mut rng).unwrap();
        assert_eq!(g.values(y), vals.as_slice(), "rate {rate} training {training}");
    }
}

#[test]
fn dropout_preserves_mean_at_large_count() {
    let n = 100_000;
    let mut g = graph32();
    let mut rng = RngStream::new(7);
    let x = g.leaf(vec![1.0; n], &[n], false).unwrap();
    let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
    let mean = g.values(y).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
}

#[test]
fn dropout_invalid_rate_rejected() {
    let mut g = graph32();
    let mut rng = RngStream::new(0);
    let x = g.leaf(vec![1.0], &[1], false).unwrap();
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    assert!(g.dropout(x, -0.1, true, &mut rng).is_err());
}

#[test]
fn concat_nine_feature_vectors() {
    let mut g = graph32();
    let parts: Vec<TensorRef> = (0..9)
        .map(|i| g.leaf(vec![i as f32; 2048], &[1, 2048], false).unwrap())
        .collect();
    let y = g.concat(&parts, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 18432]);
    assert_eq!(g.values(y)[2048], 1.0);
}

#[test]
fn concat_single_input_is_identity() {
    let mut g = graph32();
    let x = g.leaf(vec![1.0, 2.0, 3.0], &[1, 3], false).unwrap();
    let y = g.concat(&[x], 1).unwrap();
    assert_eq!(g.values(y), g.values(x));
}

#[test]
fn concat_then_slice_recovers_inputs() {
    let mut g = graph32();
    let a_vals: Vec<f32> = (0..6).map(|i| i as f32).collect();
    let b_vals: Vec<f32> = (10..20).map(|i| i as f32).collect();
    let a = g.leaf(a_vals.clone(), &[1, 1, 2, 3], false).unwrap();
    let b = g.leaf(b_vals.clone(), &[1, 1, 2, 5], false).unwrap();
    let cat = g.concat(&[a, b], 3).unwrap();
    assert_eq!(g.shape(cat), &[1, 1, 2, 8]);
    let a2 = g.slice_region(cat, 0, 0, 2, 3).unwrap();
    let b2 = g.slice_region(cat, 0, 3, 2, 5).unwrap();
    assert_eq!(g.values(a2), a_vals.as_slice());
    assert_eq!(g.values(b2), b_vals.as_slice());
}

#[test]
fn concat_shape_disagreement_rejected() {
    let mut g = graph32();
    let a = g.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
    let b = g.leaf(vec![0.0; 8], &[4, 2], false).unwrap();
    assert!(matches!(g.concat(&[a, b], 1), Err(TensorError::ConcatMismatch { index: 1, .. })));
}

#[test]
fn slice_region_top_left_quadrant() {
    let mut g = graph32();
    let vals: Vec<f32> = (0..144).map(|i| i as f32).collect();
    let x = g.leaf(vals, &[1, 1, 12, 12], false).unwrap();
    let y = g.slice_region(x, 0, 0, 6, 6).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 6, 6]);
    assert_eq!(g.values(y)[0], 0.0);
    assert_eq!(g.values(y)[5], 5.0);
    assert_eq!(g.values(y)[6], 12.0); // second row starts at input row 1
}

#[test]
fn slice_region_full_extent_is_identity() {
    let mut g = graph32();
    let vals: Vec<f32> = (0..48).map(|i| i as f32 * 0.25).collect();
    let x = g.leaf(vals.clone(), &[1, 3, 4, 4], false).unwrap();
    let y = g.slice_region(x, 0, 0, 4, 4).unwrap();
    assert_eq!(g.values(y), vals.as_slice());
}

#[test]
fn slice_region_gradient_scatter_counts() {
    let mut g = graph32();
    let x = g.leaf(vec![0.0; 144], &[1, 1, 12, 12], true).unwrap();
    let y = g.slice_region(x, 3, 3, 6, 6).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    let ones = grad.iter().filter(|&&v| v == 1.0).count();
    let zeros = grad.iter().filter(|&&v| v == 0.0).count();
    assert_eq!((ones, zeros), (36, 108));
}

#[test]
fn slice_region_out_of_bounds_rejected() {
    let mut g = graph32();
    let x = g.leaf(vec![0.0; 144], &[1, 1, 12, 12], false).unwrap();
    assert!(matches!(
        g.slice_region(x, 8, 0, 6, 6),
        Err(TensorError::WindowOutOfBounds { .. })
    ));
}

#[test]
fn add_zero_and_gradient_fanout() {
    let mut g = graph32();
    let a = g.leaf(vec![1.0, -2.0, 3.0], &[3], true).unwrap();
    let z = g.leaf(vec![0.0; 3], &[3], true).unwrap();
    let y = g.add(a, z).unwrap();
    assert_eq!(g.values(y), g.values(a));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0; 3]);
    assert_eq!(g.grad(z).unwrap(), &[1.0; 3]);
}

#[test]
fn add_requires_identical_shapes() {
    let mut g = graph32();
    let a = g.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
    let b = g.leaf(vec![0.0; 4], &[4], false).unwrap();
    assert!(g.add(a, b).is_err());
}

#[test]
fn residual_projection_merge_preserves_shape() {
    let mut g = graph32();
    let x = g.leaf(vec![0.1; 16 * 25], &[1, 16, 5, 5], false).unwrap();
    // main path to 32 channels
    let wm = g.leaf(vec![0.01; 32 * 16 * 9], &[32, 16, 3, 3], false).unwrap();
    let bm = g.leaf(vec![0.0; 32], &[32], false).unwrap();
    let main = g.conv2d(x, wm, bm, 1, 1).unwrap();
    // 1x1 projection of the skip
    let wp = g.leaf(vec![0.02; 32 * 16], &[32, 16, 1, 1], false).unwrap();
    let bp = g.leaf(vec![0.0; 32], &[32], false).unwrap();
    let skip = g.conv2d(x, wp, bp, 1, 0).unwrap();
    let y = g.add(main, skip).unwrap();
    assert_eq!(g.shape(y), &[1, 32, 5, 5]);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = graph32();
    let x = g.leaf(vec![5.0, -1.0, 0.25, 9.0], &[4], true).unwrap();
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    assert_eq!(g.grad(s).unwrap(), &[1.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = graph32();
    let x = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = graph32();
    let x = g.leaf(vec![1.0], &[1], true).unwrap();
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.backward(s), Err(TensorError::BackwardTwice));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = graph32();
    let x = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss { .. })));
}

#[test]
fn composite_graph_matches_finite_differences() {
    // conv -> relu -> linear, all parameters checked at once
    let mut rng = RngStream::new(21);
    let x: Vec<f64> = (0..25).map(|_| rng.range(-1.0, 1.0)).collect();
    let w: Vec<f64> = (0..18).map(|_| rng.range(-0.7, 0.7)).collect();
    let b = vec![0.05, -0.1];
    let fw: Vec<f64> = (0..2 * 50).map(|_| rng.range(-0.5, 0.5)).collect();
    let fb = vec![0.2, 0.3];
    let inputs = vec![
        (x, vec![1, 1, 5, 5]),
        (w, vec![2, 1, 3, 3]),
        (b, vec![2]),
        (fw, vec![2, 50]),
        (fb, vec![2]),
    ];
    let err = grad_check(
        |g, t| {
            let c = g.conv2d(t[0], t[1], t[2], 1, 1)?;
            let r = g.relu(c);
            let flat = g.flatten(r)?;
            let y = g.linear(flat, t[3], t[4])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn grad_check_linear_tight() {
    let mut rng = RngStream::new(33);
    let x: Vec<f64> = (0..32).map(|_| rng.range(-1.0, 1.0)).collect();
    let w: Vec<f64> = (0..3 * 8).map(|_| rng.range(-1.0, 1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.range(-1.0, 1.0)).collect();
    let err = grad_check(
        |g, t| {
            let y = g.linear(t[0], t[1], t[2])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        },
        &[(x, vec![4, 8]), (w, vec![3, 8]), (b, vec![3])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn grad_check_conv_tight() {
    let mut rng = RngStream::new(17);
    let x: Vec<f64> = (0..2 * 2 * 6 * 6).map(|_| rng.range(-1.0, 1.0)).collect();
    let w: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.range(-0.5, 0.5)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.range(-0.2, 0.2)).collect();
    let err = grad_check(
        |g, t| {
            let y = g.conv2d(t[0], t[1], t[2], 1, 1)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        },
        &[(x, vec![2, 2, 6, 6]), (w, vec![3, 2, 3, 3]), (b, vec![3])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn grad_check_smooth_l1_away_from_breakpoints() {
    // keep |pred - target| > 2 eps away from the |x| = 0.01 seams
    let pred = vec![0.5, -0.3, 0.003, -0.002, 0.2];
    let target = vec![0.0; 5];
    let err = grad_check(
        |g, t| {
            let tgt = g.leaf(vec![0.0; 5], &[5], false)?;
            g.smooth_l1(t[0], tgt, 0.01)
        },
        &[(pred.clone(), vec![5])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "max rel err {err}");
    let _ = target;
}

#[test]
fn leaf_length_validation() {
    let mut g = graph32();
    assert!(matches!(
        g.leaf(vec![0.0; 5], &[2, 3], false),
        Err(TensorError::LengthMismatch { .. })
    ));
    assert!(g.leaf(vec![0.0; 6], &[2, 3], false).is_ok());
}

#[test]
fn loss_rejects_nan_inputs() {
    let mut g = graph32();
    let p = g.leaf(vec![f32::NAN], &[1], false).unwrap();
    let t = g.leaf(vec![0.0], &[1], false).unwrap();
    assert_eq!(g.smooth_l1(p, t, 0.01), Err(TensorError::NonFinite { op: "smooth_l1" }));
    assert_eq!(g.l2_loss(p, t), Err(TensorError::NonFinite { op: "l2_loss" }));
}

#[test]
fn gradients_stay_finite_through_deep_graph() {
    let mut g = graph64();
    let mut rng = RngStream::new(5);
    let x = g
        .leaf((0..64).map(|_| rng.range(-1.0, 1.0)).collect(), &[1, 1, 8, 8], true)
        .unwrap();
    let w = g.leaf((0..36).map(|_| rng.range(-1.0, 1.0)).collect(), &[4, 1, 3, 3], true).unwrap();
    let b = g.leaf(vec![0.0; 4], &[4], true).unwrap();
    let c = g.conv2d(x, w, b, 1, 1).unwrap();
    let r = g.relu(c);
    let p = g.maxpool2d(r, 2, 2).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    for t in [x, w, b] {
        assert!(g.grad(t).unwrap().iter().all(|v| v.is_finite()));
    }
}
