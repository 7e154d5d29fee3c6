//! Forward ops against independent naive references, and gradient checks
//! at both float widths.
//!
//! The references below are deliberately plain quadruple loops with no
//! shared code paths with the engine.

use ren_core::{Graph, RngStream, TensorRef};

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn rand_vec(rng: &mut RngStream, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range(lo, hi)).collect()
}

/// direct convolution sum, quadruple loop
#[allow(clippy::too_many_arguments)]
fn naive_conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (oc, _ic, kh, kw): (usize, usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize)) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    let xv = x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                    let wv = wt[((o * c + ic) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                    }
                    out[((b * oc + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, (oh, ow))
}

fn naive_maxpool(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::new();
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        best = best.max(x[plane * h * w + (oy * stride + ky) * w + ox * stride + kx]);
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

fn naive_linear(x: &[f64], batch: usize, d: usize, w: &[f64], o: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; batch * o];
    for b in 0..batch {
        for j in 0..o {
            let mut acc = bias[j];
            for i in 0..d {
                acc += x[b * d + i] * w[j * d + i];
            }
            out[b * o + j] = acc;
        }
    }
    out
}

#[test]
fn conv2d_agrees_with_naive_reference() {
    let mut rng = RngStream::new(100);
    for case in 0..24 {
        let n = 1 + (case % 2);
        let c = 1 + rng.below(8) as usize;
        let oc = 1 + rng.below(8) as usize;
        let h = 3 + rng.below(14) as usize;
        let w = 3 + rng.below(14) as usize;
        let k = [1, 3, 5][rng.below(3) as usize].min(h).min(w);
        let stride = 1 + rng.below(2) as usize;
        let pad = rng.below(2) as usize;

        let x = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
        let wt = rand_vec(&mut rng, oc * c * k * k, -1.0, 1.0);
        let bias = rand_vec(&mut rng, oc, -0.5, 0.5);

        let (expected, _) =
            naive_conv2d(&x, (n, c, h, w), &wt, (oc, c, k, k), &bias, stride, pad);

        let mut g: Graph<f64> = Graph::new();
        let xi = g.leaf(x, &[n, c, h, w], false).unwrap();
        let wi = g.leaf(wt, &[oc, c, k, k], false).unwrap();
        let bi = g.leaf(bias, &[oc], false).unwrap();
        let y = g.conv2d(xi, wi, bi, stride, pad).unwrap();
        let got = g.values(y);
        assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!(rel_close(*a, *b, 1e-6), "{a} vs {b} (case {case})");
        }
    }
}

#[test]
fn maxpool_agrees_with_naive_reference() {
    let mut rng = RngStream::new(101);
    for _ in 0..16 {
        let n = 1 + rng.below(2) as usize;
        let c = 1 + rng.below(8) as usize;
        let k = 2 + rng.below(2) as usize;
        let stride = 1 + rng.below(2) as usize;
        let h = k + rng.below(12) as usize;
        let w = k + rng.below(12) as usize;
        let x = rand_vec(&mut rng, n * c * h * w, -2.0, 2.0);
        let expected = naive_maxpool(&x, (n, c, h, w), k, stride);

        let mut g: Graph<f64> = Graph::new();
        let xi = g.leaf(x, &[n, c, h, w], false).unwrap();
        let y = g.maxpool2d(xi, k, stride).unwrap();
        assert_eq!(g.values(y), expected.as_slice());
    }
}

#[test]
fn linear_agrees_with_naive_reference() {
    let mut rng = RngStream::new(102);
    for _ in 0..16 {
        let batch = 1 + rng.below(6) as usize;
        let d = 1 + rng.below(40) as usize;
        let o = 1 + rng.below(20) as usize;
        let x = rand_vec(&mut rng, batch * d, -1.0, 1.0);
        let w = rand_vec(&mut rng, o * d, -1.0, 1.0);
        let b = rand_vec(&mut rng, o, -1.0, 1.0);
        let expected = naive_linear(&x, batch, d, &w, o, &b);

        let mut g: Graph<f64> = Graph::new();
        let xi = g.leaf(x, &[batch, d], false).unwrap();
        let wi = g.leaf(w, &[o, d], false).unwrap();
        let bi = g.leaf(b, &[o], false).unwrap();
        let y = g.linear(xi, wi, bi).unwrap();
        for (a, e) in g.values(y).iter().zip(expected.iter()) {
            assert!(rel_close(*a, *e, 1e-6));
        }
    }
}

#[test]
fn slice_and_concat_agree_with_direct_indexing() {
    let mut rng = RngStream::new(103);
    for _ in 0..12 {
        let c = 1 + rng.below(4) as usize;
        let h = 4 + rng.below(10) as usize;
        let w = 4 + rng.below(10) as usize;
        let x = rand_vec(&mut rng, c * h * w, -1.0, 1.0);
        let rh = 1 + rng.below(h as u64 - 1) as usize;
        let rw = 1 + rng.below(w as u64 - 1) as usize;
        let ro = rng.below((h - rh) as u64 + 1) as usize;
        let co = rng.below((w - rw) as u64 + 1) as usize;

        let mut g: Graph<f64> = Graph::new();
        let xi = g.leaf(x.clone(), &[1, c, h, w], false).unwrap();
        let y = g.slice_region(xi, ro, co, rh, rw).unwrap();
        let got = g.values(y);
        let mut idx = 0;
        for ch in 0..c {
            for yy in 0..rh {
                for xx in 0..rw {
                    let direct = x[ch * h * w + (ro + yy) * w + (co + xx)];
                    assert_eq!(got[idx], direct);
                    idx += 1;
                }
            }
        }
    }
}

#[test]
fn gradient_suite_32bit() {
    // f32 gradients within 1e-4 of central differences. The loss is
    // quadratic, so the difference quotient carries no truncation error
    // and eps only needs to beat the f32 forward rounding noise.
    let mut rng = RngStream::new(104);
    let x: Vec<f32> = (0..2 * 2 * 5 * 5).map(|_| rng.range(-1.0, 1.0) as f32).collect();
    let w: Vec<f32> = (0..3 * 2 * 9).map(|_| rng.range(-0.5, 0.5) as f32).collect();
    let b: Vec<f32> = (0..3).map(|_| rng.range(-0.2, 0.2) as f32).collect();
    let err = ren_core::tensor::grad_check(
        |g: &mut Graph<f32>, t: &[TensorRef]| {
            let y = g.conv2d(t[0], t[1], t[2], 1, 1)?;
            let flat = g.flatten(y)?;
            let shape = g.shape(flat).to_vec();
            let zero = g.zeros(&shape, false)?;
            g.l2_loss(flat, zero)
        },
        &[(x, vec![2, 2, 5, 5]), (w, vec![3, 2, 3, 3]), (b, vec![3])],
        5e-2,
    )
    .unwrap();
    assert!(err < 1e-4, "32-bit max rel err {err}");
}

#[test]
fn gradient_suite_64bit_all_layers() {
    let mut rng = RngStream::new(105);
    // conv
    let x = rand_vec(&mut rng, 2 * 6 * 6, -1.0, 1.0);
    let w = rand_vec(&mut rng, 2 * 2 * 9, -0.7, 0.7);
    let b = rand_vec(&mut rng, 2, -0.1, 0.1);
    let err = ren_core::tensor::grad_check(
        |g: &mut Graph<f64>, t: &[TensorRef]| {
            let y = g.conv2d(t[0], t[1], t[2], 1, 1)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        },
        &[(x, vec![1, 2, 6, 6]), (w, vec![2, 2, 3, 3]), (b, vec![2])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "conv: {err}");

    // pool + slice + concat + add + scale through one graph
    let x = rand_vec(&mut rng, 2 * 8 * 8, -1.0, 1.0);
    let err = ren_core::tensor::grad_check(
        |g: &mut Graph<f64>, t: &[TensorRef]| {
            let p = g.maxpool2d(t[0], 2, 2)?;
            let a = g.slice_region(p, 0, 0, 2, 2)?;
            let b = g.slice_region(p, 2, 2, 2, 2)?;
            let cat = g.concat(&[a, b], 1)?;
            let doubled = g.add(cat, cat)?;
            let scaled = g.scale(doubled, 0.75);
            let sq = g.mul(scaled, scaled)?;
            Ok(g.sum(sq))
        },
        &[(x, vec![1, 2, 8, 8])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "pool/slice/concat/add/scale: {err}");

    // linear + reshape
    let x = rand_vec(&mut rng, 3 * 10, -1.0, 1.0);
    let w = rand_vec(&mut rng, 4 * 10, -1.0, 1.0);
    let b = rand_vec(&mut rng, 4, -1.0, 1.0);
    let err = ren_core::tensor::grad_check(
        |g: &mut Graph<f64>, t: &[TensorRef]| {
            let y = g.linear(t[0], t[1], t[2])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        },
        &[(x, vec![3, 10]), (w, vec![4, 10]), (b, vec![4])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "linear: {err}");

    // both losses, away from the smooth-l1 breakpoints
    let pred = rand_vec(&mut rng, 12, 0.05, 0.9);
    let target = rand_vec(&mut rng, 12, -0.9, -0.05);
    let t2 = target.clone();
    let err = ren_core::tensor::grad_check(
        move |g: &mut Graph<f64>, t: &[TensorRef]| {
            let tgt = g.leaf(t2.clone(), &[12], false)?;
            g.smooth_l1(t[0], tgt, 0.01)
        },
        &[(pred.clone(), vec![12])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "smooth_l1: {err}");

    let t3 = target.clone();
    let err = ren_core::tensor::grad_check(
        move |g: &mut Graph<f64>, t: &[TensorRef]| {
            let tgt = g.leaf(t3.clone(), &[12], false)?;
            g.l2_loss(t[0], tgt)
        },
        &[(pred, vec![12])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "l2: {err}");
}

#[test]
fn dropout_gradient_routes_through_mask() {
    // fixed seed: the mask is identical across both closure invocations
    let mut rng = RngStream::new(106);
    let x = rand_vec(&mut rng, 64, 0.5, 1.5);
    let err = ren_core::tensor::grad_check(
        |g: &mut Graph<f64>, t: &[TensorRef]| {
            let mut stream = RngStream::new(42);
            let d = g.dropout(t[0], 0.5, true, &mut stream)?;
            let sq = g.mul(d, d)?;
            Ok(g.sum(sq))
        },
        &[(x, vec![64])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "dropout: {err}");
}
