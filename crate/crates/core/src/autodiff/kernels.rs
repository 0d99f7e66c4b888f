//! Forward and backward kernels on raw row-major slices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, wd] = *x else {
            return Err(Error::shape(
                "conv2d",
                "input [N, C, H, W]",
                format!("{x:?}"),
            ));
        };
        let [o, wc, kh, kw] = *w else {
            return Err(Error::shape(
                "conv2d",
                "weight [O, C, kh, kw]",
                format!("{w:?}"),
            ));
        };
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("weight in-channels {c} (input C)"),
                format!("{wc} (weight dim 1)"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} must be odd"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input at least {kh}x{kw}"),
                format!("{}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + j - pad` is in range.
fn valid_cols(g: &ConvGeom, j: usize) -> (usize, usize) {
    let shift = j as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) + s - 1) / s
    };
    let hi = ((g.w as isize - shift + s - 1) / s).clamp(0, g.wo as isize);
    (lo as usize, (hi as usize).max(lo as usize))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, j);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = (lo * g.stride + j) - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src_row[first..first + (hi - lo)]);
                    } else {
                        for (k, out) in line[lo..hi].iter_mut().enumerate() {
                            *out = src_row[first + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, j);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let first = (lo * g.stride + j) - g.pad;
                    for (k, &v) in line.iter().enumerate() {
                        dst_row[first + k * g.stride] += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let yn = &mut out[n * g.o * plane..(n + 1) * g.o * plane];
        if let Some(b) = b {
            for (oc, chunk) in yn.chunks_mut(plane).enumerate() {
                chunk.fill(b[oc]);
            }
        }
        let rhs: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.o,
            patch,
            plane,
            w,
            patch as isize,
            1,
            rhs,
            plane as isize,
            1,
            beta,
            yn,
            plane as isize,
            1,
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let plane = g.out_plane();
    let patch = g.patch();
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); g.o]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane }];
    let mut dcols = vec![
        T::zero();
        if need_dx && !g.is_pointwise() {
            patch * plane
        } else {
            0
        }
    ];

    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let dyn_ = &dy[n * g.o * plane..(n + 1) * g.o * plane];
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in dyn_.chunks(plane).enumerate() {
                db[oc] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let rhs: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dW[o, p] += sum_q dY[o, q] * cols[p, q]
            T::gemm(
                g.o,
                plane,
                patch,
                dyn_,
                plane as isize,
                1,
                rhs,
                1,
                plane as isize,
                T::one(),
                dw,
                patch as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
            if g.is_pointwise() {
                // dX[c, q] = sum_o W[o, c] * dY[o, q]
                T::gemm(
                    patch,
                    g.o,
                    plane,
                    w,
                    1,
                    patch as isize,
                    dyn_,
                    plane as isize,
                    1,
                    T::zero(),
                    dxn,
                    plane as isize,
                    1,
                );
            } else {
                T::gemm(
                    patch,
                    g.o,
                    plane,
                    w,
                    1,
                    patch as isize,
                    dyn_,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    plane as isize,
                    1,
                );
                col2im(&dcols, g, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-(sample, group) mean and reciprocal standard deviation.
pub(crate) fn group_norm_forward<T: Scalar>(
    x: &[T],
    (n, c, hw): (usize, usize, usize),
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<(T, T)>) {
    let cpg = c / groups;
    let count = T::lit((cpg * hw) as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(n * groups);
    for s in 0..n {
        for gi in 0..groups {
            let start = (s * c + gi * cpg) * hw;
            let seg = &x[start..start + cpg * hw];
            let mean = seg.iter().copied().sum::<T>() / count;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let rstd = (var + eps).sqrt().recip();
            stats.push((mean, rstd));
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * hw;
                for k in 0..hw {
                    out[off + k] = (x[off + k] - mean) * rstd * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (out, stats)
}

pub(crate) struct NormGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dgamma: Option<Vec<T>>,
    pub dbeta: Option<Vec<T>>,
}

pub(crate) fn group_norm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    (n, c, hw): (usize, usize, usize),
    groups: usize,
    gamma: &[T],
    stats: &[(T, T)],
    need: (bool, bool, bool),
) -> NormGrads<T> {
    let cpg = c / groups;
    let count = T::lit((cpg * hw) as f64);
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dgamma = need.1.then(|| vec![T::zero(); c]);
    let mut dbeta = need.2.then(|| vec![T::zero(); c]);
    for s in 0..n {
        for gi in 0..groups {
            let (mean, rstd) = stats[s * groups + gi];
            let start = (s * c + gi * cpg) * hw;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * hw;
                let mut dg = T::zero();
                let mut dbt = T::zero();
                for k in 0..hw {
                    let xhat = (x[off + k] - mean) * rstd;
                    let g = dy[off + k];
                    dg += g * xhat;
                    dbt += g;
                    let dxhat = g * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if let Some(d) = dgamma.as_mut() {
                    d[ch] += dg;
                }
                if let Some(d) = dbeta.as_mut() {
                    d[ch] += dbt;
                }
            }
            if let Some(dx) = dx.as_mut() {
                let mean_dxhat = sum_dxhat / count;
                let mean_dxhat_xhat = sum_dxhat_xhat / count;
                for ci in 0..cpg {
                    let ch = gi * cpg + ci;
                    let off = start + ci * hw;
                    for k in 0..hw {
                        let xhat = (x[off + k] - mean) * rstd;
                        let dxhat = dy[off + k] * gamma[ch];
                        dx[off + k] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    (T::one() + (-v).exp()).recip()
}

/// Four corner indices and weights of a bilinear sample at `(x, y)`.
#[inline]
pub(crate) fn bilinear_taps<T: Scalar>(x: T, y: T, h: usize, w: usize) -> [(usize, T); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0i = x0.to_usize().unwrap_or(0).min(w - 1);
    let y0i = y0.to_usize().unwrap_or(0).min(h - 1);
    let x1i = (x0i + 1).min(w - 1);
    let y1i = (y0i + 1).min(h - 1);
    let one = T::one();
    [
        (y0i * w + x0i, (one - fx) * (one - fy)),
        (y0i * w + x1i, fx * (one - fy)),
        (y1i * w + x0i, (one - fx) * fy),
        (y1i * w + x1i, fx * fy),
    ]
}
