//! Raw loops behind the tape's convolution, normalization and softmax ops.

use super::Real;
use crate::{Error, Result};

/// Geometry of a 2-d cross-correlation over `[C, F, T]` inputs.
///
/// 1-d convolution is the `F = 1`, `Kf = 1` special case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub in_f: usize,
    pub in_t: usize,
    pub k_f: usize,
    pub k_t: usize,
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub out_f: usize,
    pub out_t: usize,
}

/// Output extent of one convolution axis, or `None` if the dilated kernel does
/// not fit the padded input.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, dilation: usize, pad: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * pad;
    if kernel == 0 || stride == 0 || dilation == 0 || padded < span {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        op: &'static str,
        x_shape: (usize, usize, usize),
        w_shape: (usize, usize, usize, usize),
        stride: (usize, usize),
        dilation: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let (c_in, in_f, in_t) = x_shape;
        let (c_out, w_cin, k_f, k_t) = w_shape;
        if w_cin != c_in {
            return Err(Error::dim(op, &[c_in, in_f, in_t], &[c_out, w_cin, k_f, k_t]));
        }
        let out_f = conv_out_len(in_f, k_f, stride.0, dilation.0, padding.0);
        let out_t = conv_out_len(in_t, k_t, stride.1, dilation.1, padding.1);
        match (out_f, out_t) {
            (Some(out_f), Some(out_t)) if out_f >= 1 && out_t >= 1 => Ok(ConvGeom {
                c_in,
                c_out,
                in_f,
                in_t,
                k_f,
                k_t,
                stride,
                dilation,
                padding,
                out_f,
                out_t,
            }),
            _ => Err(Error::InputTooShort {
                op,
                detail: format!(
                    "input {in_f}x{in_t} with kernel {k_f}x{k_t}, stride {stride:?}, \
                     dilation {dilation:?}, padding {padding:?} leaves no output"
                ),
            }),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k_f * self.k_t
    }

    pub fn out_len(&self) -> usize {
        self.out_f * self.out_t
    }

    /// Output positions `lo..hi` along one axis whose tap lands inside the
    /// unpadded input.
    #[inline]
    fn valid_range(out: usize, len: usize, offset: usize, stride: usize, pad: usize) -> (usize, usize) {
        // input index = o * stride + offset - pad must lie in 0..len
        let lo = pad.saturating_sub(offset).div_ceil(stride);
        let hi = if len + pad > offset {
            ((len + pad - offset - 1) / stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Visit every row segment of taps that land inside the unpadded input as
    /// `(column offset, input offset, count)`; consecutive output positions in
    /// a segment read inputs `stride.1` apart.
    #[inline]
    fn for_each_segment(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let n_out = self.out_len();
        for ci in 0..self.c_in {
            for kf in 0..self.k_f {
                let (f_lo, f_hi) = Self::valid_range(self.out_f, self.in_f, kf * self.dilation.0, self.stride.0, self.padding.0);
                for kt in 0..self.k_t {
                    let row = (ci * self.k_f + kf) * self.k_t + kt;
                    let off_t = kt * self.dilation.1;
                    let (t_lo, t_hi) = Self::valid_range(self.out_t, self.in_t, off_t, self.stride.1, self.padding.1);
                    if t_lo >= t_hi {
                        continue;
                    }
                    for of in f_lo..f_hi {
                        let f = of * self.stride.0 + kf * self.dilation.0 - self.padding.0;
                        let t = t_lo * self.stride.1 + off_t - self.padding.1;
                        visit(row * n_out + of * self.out_t + t_lo, (ci * self.in_f + f) * self.in_t + t, t_hi - t_lo);
                    }
                }
            }
        }
    }

    pub fn im2col<R: Real>(&self, x: &[R]) -> Vec<R> {
        let mut cols = vec![R::zero(); self.col_rows() * self.out_len()];
        let st = self.stride.1;
        self.for_each_segment(|c, i, n| {
            let dst = &mut cols[c..c + n];
            if st == 1 {
                dst.copy_from_slice(&x[i..i + n]);
            } else {
                for (d, s) in dst.iter_mut().zip(x[i..].iter().step_by(st)) {
                    *d = *s;
                }
            }
        });
        cols
    }

    pub fn col2im_add<R: Real>(&self, cols: &[R], dx: &mut [R]) {
        let st = self.stride.1;
        self.for_each_segment(|c, i, n| {
            let src = &cols[c..c + n];
            if st == 1 {
                for (d, s) in dx[i..i + n].iter_mut().zip(src) {
                    *d += *s;
                }
            } else {
                for (d, s) in dx[i..].iter_mut().step_by(st).zip(src) {
                    *d += *s;
                }
            }
        });
    }

    /// When every dilation is a multiple of its stride, each tap reads the
    /// same decimated grid of the padded input, so the convolution is a sum
    /// of one strided GEMM per tap over that grid with no column matrix.
    fn tap_layout(&self) -> Option<TapLayout> {
        let (sf, st) = self.stride;
        let (df, dt) = self.dilation;
        // narrow inputs make per-tap products too thin to pay off
        if df % sf != 0 || dt % st != 0 || self.c_in < TAP_MIN_CHANNELS {
            return None;
        }
        let (step_f, step_t) = (df / sf, dt / st);
        let rows = self.out_f + (self.k_f - 1) * step_f;
        let width = self.out_t + (self.k_t - 1) * step_t;
        Some(TapLayout {
            step_f,
            step_t,
            rows,
            width,
            span: (self.out_f - 1) * width + self.out_t,
        })
    }

    /// `grid[ci, a, b] = x_padded[ci, a * sf, b * st]`.
    fn decimate<R: Real>(&self, l: &TapLayout, x: &[R]) -> Vec<R> {
        let mut grid = vec![R::zero(); self.c_in * l.rows * l.width];
        self.for_each_grid_point(l, |g, i| grid[g] = x[i]);
        grid
    }

    /// Visit `(grid offset, input offset)` for grid points inside the input.
    fn for_each_grid_point(&self, l: &TapLayout, mut visit: impl FnMut(usize, usize)) {
        let (b_lo, b_hi) = Self::valid_range(l.width, self.in_t, 0, self.stride.1, self.padding.1);
        let (a_lo, a_hi) = Self::valid_range(l.rows, self.in_f, 0, self.stride.0, self.padding.0);
        for ci in 0..self.c_in {
            for a in a_lo..a_hi {
                let f = a * self.stride.0 - self.padding.0;
                let g_row = (ci * l.rows + a) * l.width;
                let x_row = (ci * self.in_f + f) * self.in_t;
                for b in b_lo..b_hi {
                    visit(g_row + b, x_row + b * self.stride.1 - self.padding.1);
                }
            }
        }
    }

    fn tap_offset(&self, l: &TapLayout, kf: usize, kt: usize) -> usize {
        kf * l.step_f * l.width + kt * l.step_t
    }

    /// `y[Co, F'T'] = w[Co, Ci*Kf*Kt] . cols`.
    pub fn forward<R: Real>(&self, x: &[R], w: &[R]) -> Vec<R> {
        let Some(l) = self.tap_layout() else {
            let cols = self.im2col(x);
            let (m, k, n) = (self.c_out, self.col_rows(), self.out_len());
            let mut y = vec![R::zero(); m * n];
            R::gemm(m, k, n, R::one(), w, (k as isize, 1), &cols, (n as isize, 1), R::zero(), &mut y, (n as isize, 1));
            return y;
        };
        let grid = self.decimate(&l, x);
        let plane = (l.rows * l.width) as isize;
        let taps = self.k_f * self.k_t;
        let mut wide = vec![R::zero(); self.c_out * l.span];
        for kf in 0..self.k_f {
            for kt in 0..self.k_t {
                let tap = kf * self.k_t + kt;
                R::gemm(
                    self.c_out,
                    self.c_in,
                    l.span,
                    R::one(),
                    &w[tap..],
                    ((self.c_in * taps) as isize, taps as isize),
                    &grid[self.tap_offset(&l, kf, kt)..],
                    (plane, 1),
                    if tap == 0 { R::zero() } else { R::one() },
                    &mut wide,
                    (l.span as isize, 1),
                );
            }
        }
        let mut y = Vec::with_capacity(self.c_out * self.out_len());
        for co in 0..self.c_out {
            for of in 0..self.out_f {
                let start = co * l.span + of * l.width;
                y.extend_from_slice(&wide[start..start + self.out_t]);
            }
        }
        y
    }

    pub fn backward<R: Real>(
        &self,
        x: &[R],
        w: &[R],
        dy: &[R],
        dx: Option<&mut [R]>,
        dw: Option<&mut [R]>,
    ) {
        let Some(l) = self.tap_layout() else {
            return self.backward_cols(x, w, dy, dx, dw);
        };
        let taps = self.k_f * self.k_t;
        let plane = l.rows * l.width;
        // dy in the wide layout; columns past out_t stay zero
        let mut wide = vec![R::zero(); self.c_out * l.span];
        for co in 0..self.c_out {
            for of in 0..self.out_f {
                let src = (co * self.out_f + of) * self.out_t;
                let dst = co * l.span + of * l.width;
                wide[dst..dst + self.out_t].copy_from_slice(&dy[src..src + self.out_t]);
            }
        }
        if let Some(dw) = dw {
            let grid = self.decimate(&l, x);
            for kf in 0..self.k_f {
                for kt in 0..self.k_t {
                    let tap = kf * self.k_t + kt;
                    R::gemm(
                        self.c_out,
                        l.span,
                        self.c_in,
                        R::one(),
                        &wide,
                        (l.span as isize, 1),
                        &grid[self.tap_offset(&l, kf, kt)..],
                        (1, plane as isize),
                        R::one(),
                        &mut dw[tap..],
                        ((self.c_in * taps) as isize, taps as isize),
                    );
                }
            }
        }
        if let Some(dx) = dx {
            let mut dgrid = vec![R::zero(); self.c_in * plane];
            for kf in 0..self.k_f {
                for kt in 0..self.k_t {
                    let tap = kf * self.k_t + kt;
                    let off = self.tap_offset(&l, kf, kt);
                    R::gemm(
                        self.c_in,
                        self.c_out,
                        l.span,
                        R::one(),
                        &w[tap..],
                        (taps as isize, (self.c_in * taps) as isize),
                        &wide,
                        (l.span as isize, 1),
                        R::one(),
                        &mut dgrid[off..],
                        (plane as isize, 1),
                    );
                }
            }
            self.for_each_grid_point(&l, |g, i| dx[i] += dgrid[g]);
        }
    }

    fn backward_cols<R: Real>(&self, x: &[R], w: &[R], dy: &[R], dx: Option<&mut [R]>, dw: Option<&mut [R]>) {
        let (m, k, n) = (self.c_out, self.col_rows(), self.out_len());
        if let Some(dw) = dw {
            let cols = self.im2col(x);
            // dw += dy . cols^T
            R::gemm(m, n, k, R::one(), dy, (n as isize, 1), &cols, (1, n as isize), R::one(), dw, (k as isize, 1));
        }
        if let Some(dx) = dx {
            // dcols = w^T . dy
            let mut dcols = vec![R::zero(); k * n];
            R::gemm(k, m, n, R::one(), w, (1, k as isize), dy, (n as isize, 1), R::zero(), &mut dcols, (n as isize, 1));
            self.col2im_add(&dcols, dx);
        }
    }
}

const TAP_MIN_CHANNELS: usize = 8;

/// Decimated-grid geometry of [`ConvGeom`]'s direct path.
#[derive(Clone, Copy, Debug)]
struct TapLayout {
    step_f: usize,
    step_t: usize,
    rows: usize,
    width: usize,
    /// Columns of the wide output that cover every valid position.
    span: usize,
}

/// Row-wise softmax over the last axis of width `d`.
pub fn softmax_rows<R: Real>(x: &[R], d: usize) -> Vec<R> {
    let mut y = vec![R::zero(); x.len()];
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let m = xr.iter().copied().fold(R::neg_infinity(), R::max);
        let mut s = R::zero();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in yr.iter_mut() {
            *o /= s;
        }
    }
    y
}

pub fn softmax_rows_backward<R: Real>(y: &[R], dy: &[R], d: usize, dx: &mut [R]) {
    for ((yr, gr), dr) in y.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *o += yv * (gv - dot);
        }
    }
}

/// Per-row mean and reciprocal standard deviation (biased variance).
pub fn row_stats<R: Real>(x: &[R], d: usize, eps: R) -> Vec<(R, R)> {
    let n = R::of_usize(d);
    x.chunks_exact(d)
        .map(|r| {
            let mean = r.iter().copied().sum::<R>() / n;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
            (mean, R::one() / (var + eps).sqrt())
        })
        .collect()
}

pub fn layer_norm_forward<R: Real>(x: &[R], gamma: &[R], beta: &[R], stats: &[(R, R)]) -> Vec<R> {
    let d = gamma.len();
    let mut y = vec![R::zero(); x.len()];
    for ((xr, yr), &(mean, rstd)) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).zip(stats) {
        for j in 0..d {
            yr[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
    }
    y
}

pub struct LayerNormGrads<'a, R> {
    pub dx: Option<&'a mut [R]>,
    pub dgamma: Option<&'a mut [R]>,
    pub dbeta: Option<&'a mut [R]>,
}

pub fn layer_norm_backward<R: Real>(
    x: &[R],
    gamma: &[R],
    stats: &[(R, R)],
    dy: &[R],
    mut out: LayerNormGrads<'_, R>,
) {
    let d = gamma.len();
    let n = R::of_usize(d);
    let mut xhat = vec![R::zero(); d];
    let mut dxhat = vec![R::zero(); d];
    for (r, (&(mean, rstd), gr)) in stats.iter().zip(dy.chunks_exact(d)).enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = gr[j] * gamma[j];
        }
        if let Some(dg) = out.dgamma.as_deref_mut() {
            for j in 0..d {
                dg[j] += gr[j] * xhat[j];
            }
        }
        if let Some(db) = out.dbeta.as_deref_mut() {
            for j in 0..d {
                db[j] += gr[j];
            }
        }
        if let Some(dx) = out.dx.as_deref_mut() {
            let m1 = dxhat.iter().copied().sum::<R>() / n;
            let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<R>() / n;
            let dr = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                dr[j] += rstd * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
    }
}
