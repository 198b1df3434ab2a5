//! Forward and adjoint kernels behind the graph ops. All image-like tensors
//! are `[channels, height, width]`.

use alloc::vec;
use alloc::vec::Vec;

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, with either
/// operand optionally transposed in storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the extents described by the strides,
    // as checked by the length assertions above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let n = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[o, :] = w[o, :] . cols + b[o]`.
pub(crate) fn conv_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, o: usize, g: &ConvGeom) -> Vec<f64> {
    let n = g.cols();
    let mut out = vec![0.0; o * n];
    if let Some(b) = b {
        for (row, &bias) in out.chunks_mut(n).zip(b) {
            row.fill(bias);
        }
    }
    let beta = if b.is_some() { 1.0 } else { 0.0 };
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        gemm(o, g.c, n, w, false, x, false, beta, &mut out);
    } else {
        let cols = im2col(x, g);
        gemm(o, g.rows(), n, w, false, &cols, false, beta, &mut out);
    }
    out
}

/// Returns `(dx, dw, db)` for a convolution given the output gradient.
pub(crate) fn conv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    o: usize,
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = g.cols();
    let r = g.rows();
    let db: Vec<f64> = gout.chunks(n).map(|row| row.iter().sum()).collect();
    let mut dw = vec![0.0; o * r];
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let cols_owned;
    let cols: &[f64] = if pointwise {
        x
    } else {
        cols_owned = im2col(x, g);
        &cols_owned
    };
    gemm(o, n, r, gout, false, cols, true, 0.0, &mut dw);
    let dx = if want_dx {
        let mut dcols = vec![0.0; r * n];
        gemm(r, o, n, w, true, gout, false, 0.0, &mut dcols);
        if pointwise {
            Some(dcols)
        } else {
            let mut dx = vec![0.0; g.c * g.h * g.w];
            col2im(&dcols, g, &mut dx);
            Some(dx)
        }
    } else {
        None
    };
    (dx, dw, db)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..len {
                m = m.max(x[at(j)]);
            }
            let mut s = 0.0;
            for j in 0..len {
                let e = libm::exp(x[at(j)] - m);
                y[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                y[at(j)] /= s;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(y: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    dx
}

/// Non-overlapping `k x k` max pooling; returns values and the flat argmax
/// of each window (first maximum wins).
pub(crate) fn max_pool(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![0.0; c * ho * wo];
    let mut arg = vec![0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = (ch * h + oy * k + dy) * w + ox * k + dx;
                        if x[idx] > best {
                            best = x[idx];
                            at = idx;
                        }
                    }
                }
                let o = (ch * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = at;
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..h {
            let row = &x[(ch * h + y) * w..][..w];
            let dst = &mut out[(ch * ho + y / k) * wo..][..wo];
            for (xi, v) in row.iter().enumerate() {
                dst[xi / k] += v * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(g: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let src = &g[(ch * ho + y / k) * wo..][..wo];
            let row = &mut dx[(ch * h + y) * w..][..w];
            for (xi, v) in row.iter_mut().enumerate() {
                *v = src[xi / k] * scale;
            }
        }
    }
    dx
}

pub(crate) fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let src = &x[(ch * h + y / 2) * w..][..w];
            let dst = &mut out[(ch * h2 + y) * w2..][..w2];
            for (xi, v) in dst.iter_mut().enumerate() {
                *v = src[xi / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            let src = &g[(ch * h2 + y) * w2..][..w2];
            let dst = &mut dx[(ch * h + y / 2) * w..][..w];
            for (xi, v) in src.iter().enumerate() {
                dst[xi / 2] += v;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], o: usize, g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; o * g.ho * g.wo];
        for oc in 0..o {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut s = 0.0;
                    for c in 0..g.c {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    s += w[((oc * g.c + c) * g.kh + ki) * g.kw + kj]
                                        * x[(c * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * g.ho + oy) * g.wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loop() {
        let g = ConvGeom {
            c: 2,
            h: 5,
            w: 6,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
            ho: 3,
            wo: 4,
        };
        let x: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..36).map(|i| ((i * 5) % 13) as f64 * 0.1 - 0.6).collect();
        let fast = conv_forward(&x, &w, None, 3, &g);
        let slow = naive_conv(&x, &w, 3, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
