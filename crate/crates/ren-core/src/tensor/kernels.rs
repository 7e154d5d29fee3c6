//! Dense CPU kernels for the convolution, pooling, and affine ops.
//!
//! Parallel loops split over independent output (or parameter) cells; each
//! cell is reduced sequentially in a fixed order, so results are bit-equal
//! for any rayon thread count. Stride-1 convolutions (the hot path) run as
//! shifted row operations over contiguous slices; other strides fall back
//! to plain index loops.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// batch, channels, height, width
pub type Dims4 = [usize; 4];

#[inline]
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// out[i] += a * x[i]
#[inline]
fn axpy<T: Scalar>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += a * v;
    }
}

/// Four-lane dot product; fixed summation order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (x, y) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        lanes[0] += x[0] * y[0];
        lanes[1] += x[1] * y[1];
        lanes[2] += x[2] * y[2];
        lanes[3] += x[3] * y[3];
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for i in chunks * 4..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Valid output range [lo, hi) for stride 1: 0 <= ox + k_off - pad < w.
#[inline]
fn shift_range(out_len: usize, in_len: usize, k_off: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k_off);
    let hi = (in_len + pad).saturating_sub(k_off).min(out_len);
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    ishape: Dims4,
    weight: &[T],
    wshape: Dims4,
    bias: &[T],
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let [_n, in_c, h, w] = ishape;
    let [out_c, _, kh, kw] = wshape;
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);

    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane_idx, plane)| {
        let b = plane_idx / out_c;
        let oc = plane_idx % out_c;
        plane.fill(bias[oc]);
        for ic in 0..in_c {
            let in_plane = &input[(b * in_c + ic) * h * w..][..h * w];
            let w_base = ((oc * in_c + ic) * kh) * kw;
            for oy in 0..oh {
                let orow = &mut plane[oy * ow..][..ow];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &in_plane[iy as usize * w..][..w];
                    let wrow = &weight[w_base + ky * kw..][..kw];
                    if stride == 1 {
                        for (kx, &wv) in wrow.iter().enumerate() {
                            let (lo, hi) = shift_range(ow, w, kx, pad);
                            if lo < hi {
                                let src = lo + kx - pad;
                                axpy(&mut orow[lo..hi], wv, &irow[src..src + (hi - lo)]);
                            }
                        }
                    } else {
                        for ox in 0..ow {
                            let xbase = (ox * stride) as isize - pad as isize;
                            let mut acc = T::zero();
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let ix = xbase + kx as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    acc += irow[ix as usize] * wv;
                                }
                            }
                            orow[ox] += acc;
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    ishape: Dims4,
    weight: &[T],
    wshape: Dims4,
    stride: usize,
    pad: usize,
    grad_out: &[T],
    d_input: Option<&mut [T]>,
    d_weight: Option<&mut [T]>,
    d_bias: Option<&mut [T]>,
) {
    let [n, in_c, h, w] = ishape;
    let [out_c, _, kh, kw] = wshape;
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);

    if let Some(db) = d_bias {
        db.par_iter_mut().enumerate().for_each(|(oc, v)| {
            let mut acc = T::zero();
            for b in 0..n {
                let g = &grad_out[(b * out_c + oc) * oh * ow..][..oh * ow];
                for &gv in g {
                    acc += gv;
                }
            }
            *v += acc;
        });
    }

    if let Some(dw) = d_weight {
        // one (oc, ic) filter slice per task, reduced over batch and output
        dw.par_chunks_mut(kh * kw).enumerate().for_each(|(pair, chunk)| {
            let oc = pair / in_c;
            let ic = pair % in_c;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = T::zero();
                    for b in 0..n {
                        let g = &grad_out[(b * out_c + oc) * oh * ow..][..oh * ow];
                        let in_plane = &input[(b * in_c + ic) * h * w..][..h * w];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = &in_plane[iy as usize * w..][..w];
                            let grow = &g[oy * ow..][..ow];
                            if stride == 1 {
                                let (lo, hi) = shift_range(ow, w, kx, pad);
                                if lo < hi {
                                    let src = lo + kx - pad;
                                    acc += dot(&grow[lo..hi], &irow[src..src + (hi - lo)]);
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && (ix as usize) < w {
                                        acc += grow[ox] * irow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                    chunk[ky * kw + kx] += acc;
                }
            }
        });
    }

    if let Some(di) = d_input {
        di.par_chunks_mut(h * w).enumerate().for_each(|(plane_idx, plane)| {
            let b = plane_idx / in_c;
            let ic = plane_idx % in_c;
            if stride == 1 {
                // dIn[iy][ix] += g[iy + p - ky][ix + p - kx] * w[ky][kx],
                // accumulated as shifted row operations
                for oc in 0..out_c {
                    let g = &grad_out[(b * out_c + oc) * oh * ow..][..oh * ow];
                    let w_base = ((oc * in_c + ic) * kh) * kw;
                    for iy in 0..h {
                        let drow = &mut plane[iy * w..][..w];
                        for ky in 0..kh {
                            let oy = iy as isize + pad as isize - ky as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let grow = &g[oy as usize * ow..][..ow];
                            let wrow = &weight[w_base + ky * kw..][..kw];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                // valid ix: 0 <= ix + pad - kx < ow
                                let lo = kx.saturating_sub(pad);
                                let hi = (ow + kx).saturating_sub(pad).min(w);
                                if lo < hi {
                                    let src = lo + pad - kx;
                                    axpy(&mut drow[lo..hi], wv, &grow[src..src + (hi - lo)]);
                                }
                            }
                        }
                    }
                }
            } else {
                // gather form: each input cell sums the output cells it fed
                for iy in 0..h {
                    for ix in 0..w {
                        let mut acc = T::zero();
                        for oc in 0..out_c {
                            let g = &grad_out[(b * out_c + oc) * oh * ow..][..oh * ow];
                            let w_base = ((oc * in_c + ic) * kh) * kw;
                            for ky in 0..kh {
                                let oy_num = iy + pad;
                                if oy_num < ky || (oy_num - ky) % stride != 0 {
                                    continue;
                                }
                                let oy = (oy_num - ky) / stride;
                                if oy >= oh {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ox_num = ix + pad;
                                    if ox_num < kx || (ox_num - kx) % stride != 0 {
                                        continue;
                                    }
                                    let ox = (ox_num - kx) / stride;
                                    if ox >= ow {
                                        continue;
                                    }
                                    acc += g[oy * ow + ox] * weight[w_base + ky * kw + kx];
                                }
                            }
                        }
                        plane[iy * w + ix] += acc;
                    }
                }
            }
        });
    }
}

/// Forward max pooling; records the flat input index of the first maximum
/// (row-major scan) per window for the backward scatter.
pub fn maxpool2d_forward<T: Scalar>(
    input: &[T],
    ishape: Dims4,
    k: usize,
    stride: usize,
    out: &mut [T],
    argmax: &mut [u32],
) {
    let [_n, _c, h, w] = ishape;
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;

    out.par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane_idx, (plane, arg_plane))| {
            let in_base = plane_idx * h * w;
            let in_plane = &input[in_base..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    let mut best = in_plane[y0 * w + x0];
                    let mut best_idx = y0 * w + x0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = (y0 + ky) * w + (x0 + kx);
                            if in_plane[idx] > best {
                                best = in_plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    plane[oy * ow + ox] = best;
                    arg_plane[oy * ow + ox] = (in_base + best_idx) as u32;
                }
            }
        });
}

pub fn maxpool2d_backward<T: Scalar>(grad_out: &[T], argmax: &[u32], d_input: &mut [T]) {
    // scatter; sequential so overlapping windows stay deterministic
    for (g, &idx) in grad_out.iter().zip(argmax.iter()) {
        d_input[idx as usize] += *g;
    }
}

/// out[b][o] = bias[o] + dot(input[b], weight[o])
pub fn linear_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    d: usize,
    weight: &[T],
    o: usize,
    bias: &[T],
    out: &mut [T],
) {
    let _ = batch;
    out.par_chunks_mut(o).enumerate().for_each(|(b, row)| {
        let in_row = &input[b * d..][..d];
        for (j, out_v) in row.iter_mut().enumerate() {
            *out_v = bias[j] + dot(in_row, &weight[j * d..][..d]);
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    d: usize,
    weight: &[T],
    o: usize,
    grad_out: &[T],
    d_input: Option<&mut [T]>,
    d_weight: Option<&mut [T]>,
    d_bias: Option<&mut [T]>,
) {
    if let Some(di) = d_input {
        di.par_chunks_mut(d).enumerate().for_each(|(b, row)| {
            let g_row = &grad_out[b * o..][..o];
            for (j, &g) in g_row.iter().enumerate() {
                axpy(row, g, &weight[j * d..][..d]);
            }
        });
    }
    if let Some(dw) = d_weight {
        dw.par_chunks_mut(d).enumerate().for_each(|(j, w_row)| {
            for b in 0..batch {
                axpy(w_row, grad_out[b * o + j], &input[b * d..][..d]);
            }
        });
    }
    if let Some(db) = d_bias {
        for (j, v) in db.iter_mut().enumerate() {
            let mut acc = T::zero();
            for b in 0..batch {
                acc += grad_out[b * o + j];
            }
            *v += acc;
        }
    }
}
