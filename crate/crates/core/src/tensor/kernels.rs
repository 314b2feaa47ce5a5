//! Dense kernels behind the tape ops.
//!
//! Convolutions lower to im2col plus a small row-major GEMM whose inner loop
//! is a contiguous axpy, which the compiler vectorizes without needing to
//! reassociate floating point sums. Parallel execution splits along batch
//! samples; per-sample weight-gradient partials are reduced afterwards in
//! ascending sample order, so any thread count produces the same bits as the
//! sequential reference.

use super::Element;
use crate::par;

/// `out += a * b` for row-major `a: m x k`, `b: k x n`, `out: m x n`.
///
/// Register-blocked microkernel: a 4-row by 16-lane output tile accumulates
/// across the whole `k` loop in locals, giving independent FMA chains and a
/// single store per tile. Per element the summation order is plain ascending
/// `p`, identical to the textbook triple loop.
pub(crate) fn gemm_acc<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        gemm_rows::<T, 4>(i, k, n, a, b, out);
        i += 4;
    }
    while i < m {
        gemm_rows::<T, 1>(i, k, n, a, b, out);
        i += 1;
    }
}

const GEMM_TILE: usize = 16;

fn gemm_rows<T: Element, const R: usize>(
    i: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
) {
    let arows: [&[T]; R] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    let mut jb = 0;
    while jb + GEMM_TILE <= n {
        let mut acc = [[T::ZERO; GEMM_TILE]; R];
        for (r, acc) in acc.iter_mut().enumerate() {
            let base = (i + r) * n + jb;
            acc.copy_from_slice(&out[base..base + GEMM_TILE]);
        }
        for p in 0..k {
            let brow: &[T; GEMM_TILE] = b[p * n + jb..p * n + jb + GEMM_TILE]
                .try_into()
                .expect("tile width");
            for (r, acc) in acc.iter_mut().enumerate() {
                let av = arows[r][p];
                for t in 0..GEMM_TILE {
                    acc[t] = av.mul_add(brow[t], acc[t]);
                }
            }
        }
        for (r, acc) in acc.iter().enumerate() {
            let base = (i + r) * n + jb;
            out[base..base + GEMM_TILE].copy_from_slice(acc);
        }
        jb += GEMM_TILE;
    }
    for j in jb..n {
        for (r, arow) in arows.iter().enumerate() {
            let mut acc = out[(i + r) * n + j];
            for (p, &av) in arow.iter().enumerate() {
                acc = av.mul_add(b[p * n + j], acc);
            }
            out[(i + r) * n + j] = acc;
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one sample `x: cin x h x w` into `cols: patch x (oh*ow)`,
/// patch-index major. Out-of-image taps are zero.
fn im2col<T: Element>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let l = d.cols();
    let mut r = 0;
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut cols[r * l..(r + 1) * l];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    let seg = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        seg.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if d.stride == 1 {
                        // At stride 1 each tap row is the input row shifted
                        // by kx - pad; copy the in-image span, zero the rest.
                        let lo = d.pad.saturating_sub(kx).min(d.ow);
                        let hi = (d.w + d.pad).saturating_sub(kx).min(d.ow).max(lo);
                        seg[..lo].fill(T::ZERO);
                        if hi > lo {
                            seg[lo..hi].copy_from_slice(&src[lo + kx - d.pad..hi + kx - d.pad]);
                        }
                        seg[hi..].fill(T::ZERO);
                    } else {
                        for (ox, o) in seg.iter_mut().enumerate() {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            *o = if ix < 0 || ix >= d.w as isize {
                                T::ZERO
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Same unfold but column-index major (`cols_t: (oh*ow) x patch`), which
/// makes the weight-gradient inner loop contiguous. Built as a blocked
/// transpose of the row-major unfold.
fn im2col_t<T: Element>(x: &[T], d: &ConvDims, cols_t: &mut [T]) {
    let k = d.patch();
    let l = d.cols();
    let mut cols = vec![T::ZERO; k * l];
    im2col(x, d, &mut cols);
    const B: usize = 16;
    for r0 in (0..k).step_by(B) {
        let rmax = (r0 + B).min(k);
        for l0 in (0..l).step_by(B) {
            let lmax = (l0 + B).min(l);
            for r in r0..rmax {
                for li in l0..lmax {
                    cols_t[li * k + r] = cols[r * l + li];
                }
            }
        }
    }
}

/// Folds `cols: patch x (oh*ow)` back onto one sample gradient, adding into
/// `gx: cin x h x w`.
fn col2im_acc<T: Element>(cols: &[T], d: &ConvDims, gx: &mut [T]) {
    let l = d.cols();
    let mut r = 0;
    for ci in 0..d.cin {
        let plane = &mut gx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &cols[r * l..(r + 1) * l];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let seg = &row[oy * d.ow..(oy + 1) * d.ow];
                    if d.stride == 1 {
                        // Mirror of the unfold fast path: the valid span of
                        // output columns maps to a contiguous input span.
                        let lo = d.pad.saturating_sub(kx).min(d.ow);
                        let hi = (d.w + d.pad).saturating_sub(kx).min(d.ow).max(lo);
                        if hi > lo {
                            let base = lo + kx - d.pad;
                            for (dv, &v) in dst[base..base + (hi - lo)].iter_mut().zip(&seg[lo..hi])
                            {
                                *dv += v;
                            }
                        }
                    } else {
                        for (ox, &v) in seg.iter().enumerate() {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Batched convolution forward pass (cross-correlation). Output layout is
/// `n x cout x oh x ow`.
pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> Vec<T> {
    let k = d.patch();
    let l = d.cols();
    let sample_in = d.cin * d.h * d.w;
    let sample_out = d.cout * l;
    let mut out = vec![T::ZERO; d.n * sample_out];
    // 1x1/stride-1/no-pad convolutions are plain channel mixes; the unfold
    // would just copy the input, so feed the GEMM directly.
    let direct = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0;
    par::for_each_chunk(&mut out, sample_out, |i, out_n| {
        if let Some(b) = bias {
            for (c, row) in out_n.chunks_exact_mut(l).enumerate() {
                row.fill(b[c]);
            }
        }
        let x_n = &x[i * sample_in..(i + 1) * sample_in];
        if direct {
            gemm_acc(d.cout, k, l, weight, x_n, out_n);
        } else {
            let mut cols = vec![T::ZERO; k * l];
            im2col(x_n, d, &mut cols);
            gemm_acc(d.cout, k, l, weight, &cols, out_n);
        }
    });
    out
}

/// Accumulates convolution adjoints into whichever buffers are provided.
/// `gx`/`gw`/`gb` may be shorter-lived accumulators already holding other
/// contributions; everything here adds, never overwrites.
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    d: &ConvDims,
    mut gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let k = d.patch();
    let l = d.cols();
    let sample_in = d.cin * d.h * d.w;
    let sample_out = d.cout * l;
    let direct = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0;

    if let Some(gx) = gx.as_deref_mut() {
        // gx_n folds W^T . gout_n back through the unfold.
        let mut wt = vec![T::ZERO; k * d.cout];
        for c in 0..d.cout {
            for r in 0..k {
                wt[r * d.cout + c] = weight[c * k + r];
            }
        }
        par::for_each_chunk(gx, sample_in, |i, gx_n| {
            let gout_n = &gout[i * sample_out..(i + 1) * sample_out];
            if direct {
                gemm_acc(k, d.cout, l, &wt, gout_n, gx_n);
            } else {
                let mut dcols = vec![T::ZERO; k * l];
                gemm_acc(k, d.cout, l, &wt, gout_n, &mut dcols);
                col2im_acc(&dcols, d, gx_n);
            }
        });
    }

    if let Some(gw) = gw {
        // Per-sample partials, reduced in ascending sample order.
        let partials = par::map_ordered(d.n, |i| {
            let x_n = &x[i * sample_in..(i + 1) * sample_in];
            let gout_n = &gout[i * sample_out..(i + 1) * sample_out];
            let mut part = vec![T::ZERO; d.cout * k];
            if direct {
                for li in 0..l {
                    for c in 0..d.cout {
                        let g = gout_n[c * l + li];
                        let row = &mut part[c * k..(c + 1) * k];
                        for (pv, ci) in row.iter_mut().zip(0..k) {
                            *pv = g.mul_add(x_n[ci * l + li], *pv);
                        }
                    }
                }
            } else {
                let mut cols_t = vec![T::ZERO; l * k];
                im2col_t(x_n, d, &mut cols_t);
                for li in 0..l {
                    let crow = &cols_t[li * k..(li + 1) * k];
                    for c in 0..d.cout {
                        let g = gout_n[c * l + li];
                        let row = &mut part[c * k..(c + 1) * k];
                        for (pv, &cv) in row.iter_mut().zip(crow) {
                            *pv = g.mul_add(cv, *pv);
                        }
                    }
                }
            }
            part
        });
        for part in &partials {
            for (o, &p) in gw.iter_mut().zip(part) {
                *o += p;
            }
        }
    }

    if let Some(gb) = gb {
        for i in 0..d.n {
            let gout_n = &gout[i * sample_out..(i + 1) * sample_out];
            for (c, row) in gout_n.chunks_exact(l).enumerate() {
                let mut acc = T::ZERO;
                for &g in row {
                    acc += g;
                }
                gb[c] += acc;
            }
        }
    }
}

/// Per-channel mean and biased variance over the batch and spatial axes,
/// accumulated in f64 via a two-pass sweep. Returned in the working dtype.
pub(crate) fn bn_batch_stats<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>) {
    let m = (n * hw) as f64;
    let stats = par::map_ordered(c, |ci| {
        let mut sum = 0.0f64;
        for i in 0..n {
            let plane = &x[(i * c + ci) * hw..(i * c + ci + 1) * hw];
            for &v in plane {
                sum += v.to_f64();
            }
        }
        let mean = sum / m;
        let mut sq = 0.0f64;
        for i in 0..n {
            let plane = &x[(i * c + ci) * hw..(i * c + ci + 1) * hw];
            for &v in plane {
                let dv = v.to_f64() - mean;
                sq += dv * dv;
            }
        }
        (mean, sq / m)
    });
    let mean = stats.iter().map(|s| T::from_f64(s.0)).collect();
    let var = stats.iter().map(|s| T::from_f64(s.1)).collect();
    (mean, var)
}

/// Normalizes in scale-shift form `y = a*x + b` with per-channel
/// `a = gamma * inv_std`, `b = beta - a * mean`.
pub(crate) fn bn_apply<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    debug_assert_eq!(x.len(), n * c * hw);
    let mut out = vec![T::ZERO; x.len()];
    par::for_each_chunk(&mut out, c * hw, |i, out_n| {
        let x_n = &x[i * c * hw..(i + 1) * c * hw];
        for ci in 0..c {
            let a = gamma[ci] * inv_std[ci];
            let b = beta[ci] - a * mean[ci];
            let src = &x_n[ci * hw..(ci + 1) * hw];
            for (o, &v) in out_n[ci * hw..(ci + 1) * hw].iter_mut().zip(src) {
                *o = a * v + b;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(n: usize, cin: usize, h: usize, w: usize, cout: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> ConvDims {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvDims { n, cin, h, w, cout, kh, kw, stride, pad, oh, ow }
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 + 0.5).collect();
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, &a, &b, &mut out);
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for p in 0..k {
                    want += a[i * k + p] * b[p * n + j];
                }
                assert!((out[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unfold_fast_path_handles_extreme_padding() {
        // stride 1 with pad larger than the in-image span of some tap rows;
        // exercises the clamped copy bounds.
        let d = dims(1, 1, 2, 1, 1, 5, 5, 1, 2);
        assert_eq!((d.oh, d.ow), (2, 1));
        let x = vec![3.0f64, 7.0];
        let mut cols = vec![-1.0; d.patch() * d.cols()];
        im2col(&x, &d, &mut cols);
        // Elementwise reference.
        for ky in 0..5 {
            for kx in 0..5 {
                for oy in 0..2 {
                    let iy = (oy + ky) as isize - 2;
                    let ix = kx as isize - 2;
                    let want = if iy < 0 || iy >= 2 || ix != 0 { 0.0 } else { x[iy as usize] };
                    assert_eq!(cols[(ky * 5 + kx) * 2 + oy], want, "ky {ky} kx {kx} oy {oy}");
                }
            }
        }
    }

    #[test]
    fn unfold_transpose_agrees() {
        let d = dims(1, 2, 5, 6, 1, 3, 3, 2, 1);
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| i as f64 * 0.01).collect();
        let k = d.patch();
        let l = d.cols();
        let mut cols = vec![0.0; k * l];
        let mut cols_t = vec![0.0; l * k];
        im2col(&x, &d, &mut cols);
        im2col_t(&x, &d, &mut cols_t);
        for r in 0..k {
            for li in 0..l {
                assert_eq!(cols[r * l + li], cols_t[li * k + r]);
            }
        }
    }
}
