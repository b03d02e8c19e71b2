//! Raw numeric kernels over flat row-major slices.
//!
//! Every kernel fixes the accumulation order of each output element, so the
//! rayon-parallel paths return bit-identical results to a sequential run.

use rayon::prelude::*;

/// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// `out[y, x] += coef * inp[y + dy, x + dx]`, zero outside the plane.
#[inline]
fn acc_shifted(out: &mut [f64], inp: &[f64], h: usize, w: usize, dy: isize, dx: isize, coef: f64) {
    if coef == 0.0 {
        return;
    }
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    if x0 >= x1 {
        return;
    }
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let src = &inp[sy as usize * w..(sy as usize + 1) * w];
        let dst = &mut out[y * w..(y + 1) * w];
        let off = x0 as isize + dx;
        for (o, i) in dst[x0..x1].iter_mut().zip(&src[off as usize..off as usize + (x1 - x0)]) {
            *o += coef * i;
        }
    }
}

/// `sum_{y,x} a[y, x] * b[y + dy, x + dx]` over the overlapping region.
#[inline]
fn dot_shifted(a: &[f64], b: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    let mut acc = 0.0;
    if x0 >= x1 {
        return acc;
    }
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let ra = &a[y * w..(y + 1) * w];
        let rb = &b[sy as usize * w..(sy as usize + 1) * w];
        let off = (x0 as isize + dx) as usize;
        for (p, q) in ra[x0..x1].iter().zip(&rb[off..off + (x1 - x0)]) {
            acc += p * q;
        }
    }
    acc
}

fn for_each_plane(out: &mut [f64], plane: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    } else {
        out.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvDims {
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// 3x3 convolution, zero padding 1, stride 1. `w` is `[cout, cin, 3, 3]`.
pub fn conv3x3_forward(x: &[f64], wt: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
    let hw = d.hw();
    let mut out = vec![0.0; d.n * d.cout * hw];
    for_each_plane(&mut out, hw, d.n * d.cout * d.cin * 9 * hw, |idx, plane| {
        let (ni, co) = (idx / d.cout, idx % d.cout);
        plane.fill(b[co]);
        for ci in 0..d.cin {
            let inp = &x[(ni * d.cin + ci) * hw..(ni * d.cin + ci + 1) * hw];
            let k = &wt[(co * d.cin + ci) * 9..(co * d.cin + ci + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    acc_shifted(plane, inp, d.h, d.w, ky as isize - 1, kx as isize - 1, k[ky * 3 + kx]);
                }
            }
        }
    });
    out
}

/// Gradients of [`conv3x3_forward`] with respect to input, weight and bias.
pub fn conv3x3_backward(x: &[f64], wt: &[f64], gout: &[f64], d: ConvDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = d.hw();
    let work = d.n * d.cout * d.cin * 9 * hw;

    let mut gx = vec![0.0; d.n * d.cin * hw];
    for_each_plane(&mut gx, hw, work, |idx, plane| {
        let (ni, ci) = (idx / d.cin, idx % d.cin);
        for co in 0..d.cout {
            let g = &gout[(ni * d.cout + co) * hw..(ni * d.cout + co + 1) * hw];
            let k = &wt[(co * d.cin + ci) * 9..(co * d.cin + ci + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    acc_shifted(plane, g, d.h, d.w, 1 - ky as isize, 1 - kx as isize, k[ky * 3 + kx]);
                }
            }
        }
    });

    let mut gw = vec![0.0; d.cout * d.cin * 9];
    for_each_plane(&mut gw, d.cin * 9, work, |co, block| {
        for ci in 0..d.cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0;
                    for ni in 0..d.n {
                        let g = &gout[(ni * d.cout + co) * hw..(ni * d.cout + co + 1) * hw];
                        let inp = &x[(ni * d.cin + ci) * hw..(ni * d.cin + ci + 1) * hw];
                        acc += dot_shifted(g, inp, d.h, d.w, ky as isize - 1, kx as isize - 1);
                    }
                    block[ci * 9 + ky * 3 + kx] = acc;
                }
            }
        }
    });

    let gb = plane_sums(gout, d.n, d.cout, hw);
    (gx, gw, gb)
}

/// Per-channel 3x3 convolution, zero padding 1. `w` is `[c, 1, 3, 3]`.
pub fn depthwise3x3_forward(x: &[f64], wt: &[f64], b: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    for_each_plane(&mut out, hw, n * c * 9 * hw, |idx, plane| {
        let ch = idx % c;
        plane.fill(b[ch]);
        let inp = &x[idx * hw..(idx + 1) * hw];
        let k = &wt[ch * 9..(ch + 1) * 9];
        for ky in 0..3 {
            for kx in 0..3 {
                acc_shifted(plane, inp, h, w, ky as isize - 1, kx as isize - 1, k[ky * 3 + kx]);
            }
        }
    });
    out
}

pub fn depthwise3x3_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let work = n * c * 9 * hw;
    let mut gx = vec![0.0; n * c * hw];
    for_each_plane(&mut gx, hw, work, |idx, plane| {
        let ch = idx % c;
        let g = &gout[idx * hw..(idx + 1) * hw];
        let k = &wt[ch * 9..(ch + 1) * 9];
        for ky in 0..3 {
            for kx in 0..3 {
                acc_shifted(plane, g, h, w, 1 - ky as isize, 1 - kx as isize, k[ky * 3 + kx]);
            }
        }
    });
    let mut gw = vec![0.0; c * 9];
    for_each_plane(&mut gw, 9, work, |ch, k| {
        for ky in 0..3 {
            for kx in 0..3 {
                let mut acc = 0.0;
                for ni in 0..n {
                    let idx = ni * c + ch;
                    acc += dot_shifted(
                        &gout[idx * hw..(idx + 1) * hw],
                        &x[idx * hw..(idx + 1) * hw],
                        h,
                        w,
                        ky as isize - 1,
                        kx as isize - 1,
                    );
                }
                k[ky * 3 + kx] = acc;
            }
        }
    });
    let gb = plane_sums(gout, n, c, hw);
    (gx, gw, gb)
}

/// Sum over batch and spatial positions for each channel of `[n, c, hw]`.
pub fn plane_sums(g: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for ni in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let idx = ni * c + ch;
            *o += g[idx * hw..(idx + 1) * hw].iter().sum::<f64>();
        }
    }
    out
}

/// `out[m, n] += a[m, k] * b[k, n]`.
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, o: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (ov, bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, o)| row(i, o));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, o)| row(i, o));
    }
}

pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(a, b, &mut out, m, k, n);
    out
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Generic axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = super::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(x[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Mirror index into `[0, n)` without repeating the edge sample; folds
/// repeatedly so any padding amount is valid.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}
