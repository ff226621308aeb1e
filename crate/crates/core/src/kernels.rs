//! Raw numeric kernels behind the graph ops. All functions work on flat
//! row-major NCHW slices and never allocate graph state.

use alloc::vec;
use alloc::vec::Vec;

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 16;

fn max_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// `c = alpha * a * b + beta * c` for an `m x k` times `k x n` product with
/// explicit (non-negative) element strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || max_index(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || max_index(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    assert!(max_index(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: every index addressed by the strides was checked against the
    // slice lengths above, and `c` does not alias `a` or `b` (borrow rules).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Returns `None` when an output extent would be non-positive.
    pub fn new(
        (n, c, h, w): (usize, usize, usize, usize),
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<ConvGeom> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom {
            n,
            c,
            h,
            w,
            out_c,
            k,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.patch() * self.pixels()).max(1)).clamp(1, self.n.max(1))
    }
}

/// Range of output columns `ox` whose input column `ox * s + kx - p` lies
/// inside `0..w`.
fn valid_cols(out_w: usize, w: usize, s: usize, kx: usize, p: usize) -> (usize, usize) {
    // ox * s + kx >= p  and  ox * s + kx - p < w
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if w + p > kx { (w + p - kx).div_ceil(s).min(out_w) } else { 0 };
    (lo.min(hi), hi)
}

/// Channel-major im2col for samples `n0..n0+nb`: row `(c, ky, kx)`, column
/// `(n, oy, ox)`.
fn im2col(x: &[f64], g: &ConvGeom, n0: usize, nb: usize, col: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let pixels = g.pixels();
    let width = nb * pixels;
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let dst_row = &mut col[r * width..(r + 1) * width];
                let (lo, hi) = valid_cols(g.out_w, g.w, s, kx, p);
                for i in 0..nb {
                    let xc = &x[((n0 + i) * g.c + c) * plane..((n0 + i) * g.c + c + 1) * plane];
                    for oy in 0..g.out_h {
                        let dst = &mut dst_row[i * pixels + oy * g.out_w..i * pixels + (oy + 1) * g.out_w];
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= g.h as isize || lo >= hi {
                            dst.fill(0.0);
                            continue;
                        }
                        let xrow = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if s == 1 {
                            let start = lo + kx - p;
                            dst[lo..hi].copy_from_slice(&xrow[start..start + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = xrow[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into `dx`.
fn col2im(dcol: &[f64], g: &ConvGeom, n0: usize, nb: usize, dx: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let pixels = g.pixels();
    let width = nb * pixels;
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let src_row = &dcol[r * width..(r + 1) * width];
                let (lo, hi) = valid_cols(g.out_w, g.w, s, kx, p);
                if lo >= hi {
                    continue;
                }
                for i in 0..nb {
                    let xc = &mut dx[((n0 + i) * g.c + c) * plane..((n0 + i) * g.c + c + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[i * pixels + oy * g.out_w..i * pixels + (oy + 1) * g.out_w];
                        let xrow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                        if s == 1 {
                            let start = lo + kx - p;
                            for (d, v) in xrow[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for ox in lo..hi {
                                xrow[ox * s + kx - p] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass. `bias` may be empty.
pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let pixels = g.pixels();
    let mut out = vec![0.0; g.n * g.out_c * pixels];
    let chunk = g.chunk();
    let mut col = vec![0.0; chunk * pixels * patch];
    let mut mat = vec![0.0; chunk * pixels * g.out_c];
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let width = nb * pixels;
        im2col(x, g, n0, nb, &mut col);
        // mat (out_c x width) = weight (out_c x patch) * col (patch x width)
        gemm(
            g.out_c,
            patch,
            width,
            1.0,
            weight,
            (patch, 1),
            &col,
            (width, 1),
            0.0,
            &mut mat,
            (width, 1),
        );
        for o in 0..g.out_c {
            let b = bias.get(o).copied().unwrap_or(0.0);
            for i in 0..nb {
                let src = &mat[o * width + i * pixels..o * width + (i + 1) * pixels];
                let dst = &mut out[((n0 + i) * g.out_c + o) * pixels..((n0 + i) * g.out_c + o + 1) * pixels];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
        n0 += nb;
    }
    out
}

/// Gradients of a convolution. Any of the output slots may be skipped by
/// passing `None`.
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let patch = g.patch();
    let pixels = g.pixels();
    if let Some(db) = db.as_deref_mut() {
        for n in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = (n * g.out_c + o) * pixels;
                *acc += grad_out[start..start + pixels].iter().sum::<f64>();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let chunk = g.chunk();
    let mut col = vec![0.0; chunk * pixels * patch];
    let mut mat = vec![0.0; chunk * pixels * g.out_c];
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let width = nb * pixels;
        for o in 0..g.out_c {
            for i in 0..nb {
                let src = &grad_out[((n0 + i) * g.out_c + o) * pixels..((n0 + i) * g.out_c + o + 1) * pixels];
                mat[o * width + i * pixels..o * width + (i + 1) * pixels].copy_from_slice(src);
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(x, g, n0, nb, &mut col);
            // dw (out_c x patch) += mat (out_c x width) * col^T (width x patch)
            gemm(
                g.out_c,
                width,
                patch,
                1.0,
                &mat,
                (width, 1),
                &col,
                (1, width),
                1.0,
                dw,
                (patch, 1),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcol (patch x width) = weight^T (patch x out_c) * mat (out_c x width)
            gemm(
                patch,
                g.out_c,
                width,
                1.0,
                weight,
                (1, patch),
                &mat,
                (width, 1),
                0.0,
                &mut col,
                (width, 1),
            );
            col2im(&col, g, n0, nb, dx);
        }
        n0 += nb;
    }
}

/// 2x2 mean pooling over `planes` planes of `h x w` (both even).
pub fn avg_pool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = 0.25 * (a + b);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = 0.25 * src[i * ow + j];
                dst[2 * i * w + 2 * j] += g;
                dst[2 * i * w + 2 * j + 1] += g;
                dst[(2 * i + 1) * w + 2 * j] += g;
                dst[(2 * i + 1) * w + 2 * j + 1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling of `planes` planes of `h x w`.
pub fn upsample2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                dst[(i / 2) * w + j / 2] += src[i * ow + j];
            }
        }
    }
}

/// Separable "valid" correlation of each `h x w` plane with a 1-D kernel
/// applied along both axes.
pub fn separable_valid(x: &[f64], planes: usize, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..ow {
                tmp[i * ow + j] = (0..k).map(|t| kernel[t] * src[i * w + j + t]).sum();
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = (0..k).map(|t| kernel[t] * tmp[(i + t) * ow + j]).sum();
            }
        }
    }
    out
}

/// Adjoint of [`separable_valid`]: maps `(h-k+1) x (w-k+1)` planes back to
/// `h x w` planes.
pub fn separable_valid_adjoint(
    g: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        tmp.fill(0.0);
        for i in 0..oh {
            for t in 0..k {
                for j in 0..ow {
                    tmp[(i + t) * ow + j] += kernel[t] * src[i * ow + j];
                }
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..ow {
                let v = tmp[i * ow + j];
                for t in 0..k {
                    dst[i * w + j + t] += kernel[t] * v;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.out_c * g.out_h * g.out_w];
        for n in 0..g.n {
            for o in 0..g.out_c {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..g.c {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((o * g.c + c) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                        out[((n * g.out_c + o) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (2, 1, 0), (1, 1, 0), (3, 2, 1)] {
            let g = ConvGeom::new((2, 3, 7, 6), 4, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.1).collect();
            let got = conv2d_forward(&x, &w, &[], &g);
            let want = naive_conv(&x, &w, &g);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn separable_adjoint_identity() {
        // <A x, y> == <x, A^T y>
        let kernel = [0.2, 0.5, 0.3];
        let (h, w) = (6, 5);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..(h - 2) * (w - 2)).map(|i| (i as f64 * 0.71).cos()).collect();
        let ax = separable_valid(&x, 1, h, w, &kernel);
        let aty = separable_valid_adjoint(&y, 1, h, w, &kernel);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
