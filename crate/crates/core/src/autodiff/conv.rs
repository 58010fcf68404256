//! Stride-1 zero-padded 2-D cross-correlation via im2col + GEMM.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-d input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, kcin, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if cin != kcin {
            return Err(Error::Dimension(format!(
                "conv2d: input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    /// 1x1 kernels without padding read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

/// `c = a·b + beta·c` with explicit `(row, column)` strides for every operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Output columns `[lo, hi)` whose input column `ox + kx - pad` is in range.
fn valid_span(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(ow);
    let hi = (w + pad).saturating_sub(kx).min(ow).max(lo);
    (lo, hi)
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_span(kx, g.pad, g.w, g.ow);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy + ky).wrapping_sub(g.pad);
                    if iy >= g.h || lo == hi {
                        line.fill(0.0);
                        continue;
                    }
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    line[lo..hi].copy_from_slice(&src[lo + kx - g.pad..hi + kx - g.pad]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_span(kx, g.pad, g.w, g.ow);
                for oy in 0..g.oh {
                    let iy = (oy + ky).wrapping_sub(g.pad);
                    if iy >= g.h || lo == hi {
                        continue;
                    }
                    let dst = &mut dxc[iy * g.w + lo + kx - g.pad..iy * g.w + hi + kx - g.pad];
                    for (d, s) in dst.iter_mut().zip(&src[oy * g.ow + lo..oy * g.ow + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(x: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (pl, plane) = (g.patch_len(), g.out_plane());
    let mut out = vec![0.0; g.n * g.cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; pl * plane]
    };
    for i in 0..g.n {
        let xi = &x[i * g.in_len()..(i + 1) * g.in_len()];
        let b: &[f64] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        let oi = &mut out[i * g.cout * plane..(i + 1) * g.cout * plane];
        // computed transposed, outᵀ[plane, cout] = colsᵀ · Kᵀ, which suits the
        // GEMM kernel's tile shape better for small channel counts
        gemm(plane, pl, g.cout, b, (1, plane), kernel, (1, pl), 0.0, oi, (1, plane));
    }
    out
}

/// Gradients with respect to the input and the kernel, each only when requested.
pub(crate) fn backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (pl, plane) = (g.patch_len(), g.out_plane());
    let mut dx = need_input.then(|| vec![0.0; x.len()]);
    let mut dk = need_kernel.then(|| vec![0.0; kernel.len()]);
    let mut cols = if need_kernel && !g.is_pointwise() {
        vec![0.0; pl * plane]
    } else {
        Vec::new()
    };
    let mut dcols = if need_input && !g.is_pointwise() {
        vec![0.0; pl * plane]
    } else {
        Vec::new()
    };
    for i in 0..g.n {
        let xi = &x[i * g.in_len()..(i + 1) * g.in_len()];
        let go = &grad_out[i * g.cout * plane..(i + 1) * g.cout * plane];
        if let Some(dk) = dk.as_mut() {
            let b: &[f64] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut cols);
                &cols
            };
            // dKᵀ[pl, cout] += cols[pl, plane] · dOutᵀ[plane, cout]
            gemm(pl, plane, g.cout, b, (plane, 1), go, (1, plane), 1.0, dk, (1, pl));
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * g.in_len()..(i + 1) * g.in_len()];
            // dCols[pl, plane] = Kᵀ[pl, cout] · dOut[cout, plane]
            if g.is_pointwise() {
                gemm(pl, g.cout, plane, kernel, (1, pl), go, (plane, 1), 1.0, dxi, (plane, 1));
            } else {
                gemm(pl, g.cout, plane, kernel, (1, pl), go, (plane, 1), 0.0, &mut dcols, (plane, 1));
                col2im_add(&dcols, g, dxi);
            }
        }
    }
    (dx, dk)
}
