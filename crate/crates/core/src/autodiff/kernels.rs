//! Dense numeric kernels shared by the tape ops.

/// `c[m×n] = beta·c + op(a)·op(b)` on row-major buffers.
///
/// `a` is stored `[m, k]`, or `[k, m]` when `trans_a`. `b` is stored `[k, n]`,
/// or `[n, k]` when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the buffer lengths were checked above and the strides address
    // only elements inside the stated logical shapes.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output positions `[lo, hi)` whose tap `t` lands inside an axis of `size`.
#[inline]
fn valid_range(g: &ConvGeom, t: usize, size: usize, out: usize) -> (usize, usize) {
    // o·stride + t − pad ∈ [0, size)
    let lo = g.pad.saturating_sub(t).div_ceil(g.stride);
    let hi = if size + g.pad > t {
        ((size + g.pad - t - 1) / g.stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold one `[c, h, w]` image into `[c·k·k, h_out·w_out]` columns.
pub fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let img = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(g, ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(g, kx, g.w, g.w_out);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if oy < ylo || oy >= yhi {
                        line.fill(0.0);
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &img[iy * g.w..(iy + 1) * g.w];
                    line[..xlo].fill(0.0);
                    line[xhi..].fill(0.0);
                    let ix0 = xlo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[xlo..xhi].copy_from_slice(&src[ix0..ix0 + xhi - xlo]);
                    } else {
                        for (j, slot) in line[xlo..xhi].iter_mut().enumerate() {
                            *slot = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c, h, w]` image.
pub fn col2im(g: &ConvGeom, cols: &[f32], x: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let img = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(g, ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(g, kx, g.w, g.w_out);
                if xlo >= xhi {
                    continue;
                }
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let ix0 = xlo * g.stride + kx - g.pad;
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut img[iy * g.w..(iy + 1) * g.w];
                    let line = &src[oy * g.w_out + xlo..oy * g.w_out + xhi];
                    for (j, &v) in line.iter().enumerate() {
                        dst[ix0 + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Inputs denser than this go through im2col and gemm.
pub const SPARSE_DENSITY: f64 = 0.1;

pub fn is_sparse(x: &[f32]) -> bool {
    let nnz = x.iter().filter(|&&v| v != 0.0).count();
    (nnz as f64) < SPARSE_DENSITY * x.len() as f64
}

/// Calls `f(row, o)` for every column entry of [`im2col`] that reads input
/// element `(c, iy, ix)`.
#[inline]
fn for_each_tap(g: &ConvGeom, c: usize, iy: usize, ix: usize, mut f: impl FnMut(usize, usize)) {
    for ky in 0..g.k {
        let ty = iy + g.pad;
        if ty < ky || !(ty - ky).is_multiple_of(g.stride) {
            continue;
        }
        let oy = (ty - ky) / g.stride;
        if oy >= g.h_out {
            continue;
        }
        for kx in 0..g.k {
            let tx = ix + g.pad;
            if tx < kx || !(tx - kx).is_multiple_of(g.stride) {
                continue;
            }
            let ox = (tx - kx) / g.stride;
            if ox >= g.w_out {
                continue;
            }
            f((c * g.k + ky) * g.k + kx, oy * g.w_out + ox);
        }
    }
}

fn for_each_nonzero(g: &ConvGeom, x: &[f32], mut f: impl FnMut(usize, usize, usize, f32)) {
    for (i, &v) in x.iter().enumerate() {
        if v != 0.0 {
            let (c, rest) = (i / (g.h * g.w), i % (g.h * g.w));
            f(c, rest / g.w, rest % g.w, v);
        }
    }
}

/// `out_t[plane, c_out] = (W · im2col(x))ᵀ` from the nonzero inputs only;
/// `wt` is the weight stored `[patch, c_out]`.
pub fn conv_scatter(g: &ConvGeom, x: &[f32], wt: &[f32], c_out: usize, out_t: &mut [f32]) {
    out_t.fill(0.0);
    for_each_nonzero(g, x, |c, iy, ix, v| {
        for_each_tap(g, c, iy, ix, |row, o| {
            let dst = &mut out_t[o * c_out..(o + 1) * c_out];
            for (d, &w) in dst.iter_mut().zip(&wt[row * c_out..(row + 1) * c_out]) {
                *d += v * w;
            }
        });
    });
}

/// `gw_t[patch, c_out] += (go · im2col(x)ᵀ)ᵀ` from the nonzero inputs only;
/// `go_t` is the output gradient stored `[plane, c_out]`.
pub fn conv_weight_grad_scatter(g: &ConvGeom, x: &[f32], go_t: &[f32], c_out: usize, gw_t: &mut [f32]) {
    for_each_nonzero(g, x, |c, iy, ix, v| {
        for_each_tap(g, c, iy, ix, |row, o| {
            let dst = &mut gw_t[row * c_out..(row + 1) * c_out];
            for (d, &gv) in dst.iter_mut().zip(&go_t[o * c_out..(o + 1) * c_out]) {
                *d += v * gv;
            }
        });
    });
}

/// Row-major `[rows, cols]` to `[cols, rows]`.
pub fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}
