//! Forward/backward kernels on raw NCHW slices.
//!
//! Kernels parallelize over the batch axis only; any cross-sample reduction is
//! summed sequentially in batch order so results do not depend on scheduling.

use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unrolls one image into a `(C·kh·kw) × (oh·ow)` column matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.pixels();
    let mut cols = vec![0.0; g.patch() * p];
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.pixels();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out += a · b` with `a: m×k`, `b: k×n`, all row-major.
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            row.iter_mut().zip(brow).for_each(|(r, bv)| *r += av * bv);
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.pixels();
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|ni| {
            let cols = im2col(&x[ni * in_sz..(ni + 1) * in_sz], g);
            let mut out = vec![0.0; out_sz];
            if let Some(b) = bias {
                for (oi, chunk) in out.chunks_mut(g.pixels()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = b[oi]);
                }
            }
            gemm_acc(g.o, g.patch(), g.pixels(), weight, &cols, &mut out);
            (out, cols)
        })
        .collect();
    let mut out = Vec::with_capacity(g.n * out_sz);
    let mut cols = Vec::with_capacity(g.n);
    for (o, c) in per_sample {
        out.extend_from_slice(&o);
        cols.push(c);
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    grad_out: &[f64],
    weight: &[f64],
    cols: &[Vec<f64>],
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads {
    let p = g.pixels();
    let patch = g.patch();
    let out_sz = g.o * p;
    let in_sz = g.c * g.h * g.w;
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|ni| {
            let go = &grad_out[ni * out_sz..(ni + 1) * out_sz];
            let col = &cols[ni];
            let mut dw = vec![0.0; g.o * patch];
            for oi in 0..g.o {
                let grow = &go[oi * p..(oi + 1) * p];
                for q in 0..patch {
                    let crow = &col[q * p..(q + 1) * p];
                    dw[oi * patch + q] = grow.iter().zip(crow).map(|(a, b)| a * b).sum();
                }
            }
            let mut dx = Vec::new();
            if need_dx {
                let mut dcols = vec![0.0; patch * p];
                for oi in 0..g.o {
                    let grow = &go[oi * p..(oi + 1) * p];
                    for q in 0..patch {
                        let wv = weight[oi * patch + q];
                        if wv == 0.0 {
                            continue;
                        }
                        dcols[q * p..(q + 1) * p]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, gv)| *d += wv * gv);
                    }
                }
                dx = vec![0.0; in_sz];
                col2im(&dcols, g, &mut dx);
            }
            (dx, dw)
        })
        .collect();

    let mut dw = vec![0.0; g.o * patch];
    let mut db = vec![0.0; g.o];
    let mut dx = if need_dx { Vec::with_capacity(g.n * in_sz) } else { Vec::new() };
    for (ni, (dxi, dwi)) in parts.into_iter().enumerate() {
        dw.iter_mut().zip(&dwi).for_each(|(a, b)| *a += b);
        dx.extend_from_slice(&dxi);
        let go = &grad_out[ni * out_sz..(ni + 1) * out_sz];
        for (oi, d) in db.iter_mut().enumerate() {
            *d += go[oi * p..(oi + 1) * p].iter().sum::<f64>();
        }
    }
    ConvGrads { dx, dw, db }
}

/// Returns pooled values and, per output, the flat input index it came from.
pub(crate) fn max_pool_forward(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    kernel: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        // strict > keeps the first maximum in row-major order
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, oh, ow)
}

/// Half-open bin `[floor(i·len/bins), ceil((i+1)·len/bins))`.
pub(crate) fn adaptive_bin(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

pub(crate) fn adaptive_avg_forward(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = adaptive_bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = adaptive_bin(j, w, ow);
                let mut s = 0.0;
                for y in y0..y1 {
                    s += src[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_backward(
    grad_out: &[f64],
    [n, c, h, w]: [usize; 4],
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = adaptive_bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = adaptive_bin(j, w, ow);
                let g = grad_out[(plane * oh + i) * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    dst[y * w + x0..y * w + x1].iter_mut().for_each(|d| *d += g);
                }
            }
        }
    }
    dx
}

/// Per-output-index source taps for half-pixel (align-corners = false)
/// linear interpolation along one axis: `(lo, hi, frac)`.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub(crate) fn bilinear_forward(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                // lerp form keeps constant planes exactly constant
                let a = src[y0 * w + x0];
                let b = src[y0 * w + x1];
                let cc = src[y1 * w + x0];
                let d = src[y1 * w + x1];
                let top = a + fx * (b - a);
                let bot = cc + fx * (d - cc);
                out.push(top + fy * (bot - top));
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    grad_out: &[f64],
    [n, c, h, w]: [usize; 4],
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        let go = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = go[i * ow + j];
                let gt = g * (1.0 - fy);
                let gb = g * fy;
                dst[y0 * w + x0] += gt * (1.0 - fx);
                dst[y0 * w + x1] += gt * fx;
                dst[y1 * w + x0] += gb * (1.0 - fx);
                dst[y1 * w + x1] += gb * fx;
            }
        }
    }
    dx
}

/// Splits a shape around `axis` into (outer, axis extent, inner) block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
