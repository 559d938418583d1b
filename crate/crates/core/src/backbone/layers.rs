//! Convolution and dense kernels on single HWC samples.
//!
//! Convolutions are lowered to GEMM through an im2col buffer laid out as
//! `[out_h * out_w, kernel * kernel * in_channels]` with the channel index
//! fastest, so a GEMM against a `[K, out_channels]` weight yields the next
//! HWC activation directly.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_h: usize, in_w: usize, in_c: usize, spec: &ConvSpec) -> Option<Self> {
        let span_h = in_h + 2 * spec.padding;
        let span_w = in_w + 2 * spec.padding;
        if spec.kernel == 0 || spec.stride == 0 || span_h < spec.kernel || span_w < spec.kernel {
            return None;
        }
        Some(Self {
            in_h,
            in_w,
            in_c,
            out_c: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            out_h: (span_h - spec.kernel) / spec.stride + 1,
            out_w: (span_w - spec.kernel) / spec.stride + 1,
        })
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    pub fn macs(&self) -> usize {
        self.positions() * self.patch_len() * self.out_c
    }
}

pub(crate) fn im2col(g: &ConvGeom, input: &[f32], cols: &mut [f32]) {
    debug_assert_eq!(input.len(), g.in_h * g.in_w * g.in_c);
    debug_assert_eq!(cols.len(), g.positions() * g.patch_len());
    let k = g.kernel;
    let pl = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * pl..][..pl];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                let dst = &mut row[ky * k * g.in_c..][..k * g.in_c];
                if iy < 0 || iy >= g.in_h as isize {
                    dst.fill(0.0);
                    continue;
                }
                let iy = iy as usize;
                let ix0 = (ox * g.stride) as isize - g.padding as isize;
                if ix0 >= 0 && ix0 as usize + k <= g.in_w {
                    let start = (iy * g.in_w + ix0 as usize) * g.in_c;
                    dst.copy_from_slice(&input[start..start + k * g.in_c]);
                } else {
                    for kx in 0..k {
                        let ix = ix0 + kx as isize;
                        let cell = &mut dst[kx * g.in_c..][..g.in_c];
                        if ix < 0 || ix >= g.in_w as isize {
                            cell.fill(0.0);
                        } else {
                            let start = (iy * g.in_w + ix as usize) * g.in_c;
                            cell.copy_from_slice(&input[start..start + g.in_c]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds column gradients back onto the input gradient.
pub(crate) fn col2im(g: &ConvGeom, dcols: &[f32], dinput: &mut [f32]) {
    let k = g.kernel;
    let pl = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &dcols[(oy * g.out_w + ox) * pl..][..pl];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                let iy = iy as usize;
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = &row[(ky * k + kx) * g.in_c..][..g.in_c];
                    let dst = &mut dinput[(iy * g.in_w + ix as usize) * g.in_c..][..g.in_c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// `c[m, n] = a[m, k] * b[k, n]` (row-major, overwriting `c`).
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[k, n] += a[m, k]^T * b[m, n]`.
pub(crate) fn matmul_at_b_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    unsafe {
        matrixmultiply::sgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m, k] = a[m, n] * b[k, n]^T` (overwriting `c`).
pub(crate) fn matmul_a_bt(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    unsafe {
        matrixmultiply::sgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            0.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}
