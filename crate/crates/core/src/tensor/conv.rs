//! im2col / col2im kernels behind the convolution ops.

use super::gemm::gemm;
use super::Real;

/// Geometry of a strided, zero-padded square-kernel cross-correlation from
/// an `h×w` image with `channels` planes onto an `oh×ow` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub(crate) fn im2col<T: Real>(img: &[T], g: &Geom, col: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|x| *x = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back onto `img` (the adjoint of [`im2col`]).
pub(crate) fn col2im<T: Real>(col: &[T], g: &Geom, img: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward conv: `x [B, Cin, H, W]`, `w [Cout, Cin·k·k]`, `bias [Cout]`.
pub(crate) fn conv_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: &[T],
    batch: usize,
    cout: usize,
    g: &Geom,
) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let in_len = g.channels * g.h * g.w;
    let mut out = vec![T::zero(); batch * cout * cols];
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        let ob = &mut out[b * cout * cols..(b + 1) * cout * cols];
        gemm(cout, rows, cols, w, false, &col, false, T::zero(), ob);
        for (o, plane) in ob.chunks_mut(cols).enumerate() {
            plane.iter_mut().for_each(|v| *v += bias[o]);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    batch: usize,
    cout: usize,
    g: &Geom,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let in_len = g.channels * g.h * g.w;
    let mut dx = want.0.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = want.1.then(|| vec![T::zero(); cout * rows]);
    let mut db = want.2.then(|| vec![T::zero(); cout]);
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..batch {
        let gyb = &gy[b * cout * cols..(b + 1) * cout * cols];
        if let Some(db) = db.as_mut() {
            for (o, plane) in gyb.chunks(cols).enumerate() {
                let mut s = T::zero();
                for &v in plane {
                    s += v;
                }
                db[o] += s;
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
            gemm(cout, cols, rows, gyb, false, &col, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, cout, cols, w, true, gyb, false, T::zero(), &mut col);
            col2im(&col, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Forward transposed conv. `x [B, Cin, H, W]`, `w [Cin, Cout·k·k]`; `g`
/// describes the forward conv from the `[Cout, OH, OW]` output back onto
/// the `H×W` input grid.
pub(crate) fn conv_t_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: &[T],
    batch: usize,
    cin: usize,
    g: &Geom,
) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let out_len = g.channels * g.h * g.w;
    let mut out = vec![T::zero(); batch * out_len];
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..batch {
        let xb = &x[b * cin * cols..(b + 1) * cin * cols];
        gemm(rows, cin, cols, w, true, xb, false, T::zero(), &mut col);
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        col2im(&col, g, ob);
        for (o, plane) in ob.chunks_mut(g.h * g.w).enumerate() {
            plane.iter_mut().for_each(|v| *v += bias[o]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    batch: usize,
    cin: usize,
    g: &Geom,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let out_len = g.channels * g.h * g.w;
    let mut dx = want.0.then(|| vec![T::zero(); batch * cin * cols]);
    let mut dw = want.1.then(|| vec![T::zero(); cin * rows]);
    let mut db = want.2.then(|| vec![T::zero(); g.channels]);
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..batch {
        let gyb = &gy[b * out_len..(b + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (o, plane) in gyb.chunks(g.h * g.w).enumerate() {
                let mut s = T::zero();
                for &v in plane {
                    s += v;
                }
                db[o] += s;
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(gyb, g, &mut col);
        let xb = &x[b * cin * cols..(b + 1) * cin * cols];
        if let Some(dw) = dw.as_mut() {
            gemm(cin, cols, rows, xb, false, &col, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * cin * cols..(b + 1) * cin * cols];
            gemm(cin, rows, cols, w, false, &col, false, T::zero(), dxb);
        }
    }
    ConvGrads { dx, dw, db }
}
