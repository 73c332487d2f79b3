//! Slice-level numeric kernels. No shape checking happens here; callers in
//! `ops` and `nn` validate first.
//!
//! Every dot product accumulates in ascending index order starting from zero,
//! so results are reproducible and agree bitwise with naive loop oracles.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D convolution over channel-last batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Input coordinate hit by output `o` and kernel tap `t`, if inside.
    #[inline]
    fn source(o: usize, t: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * stride + t) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfolds `[N, H, W, C]` into `[N*OH*OW, K*K*C]` patches ordered (kh, kw, c).
pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let c = g.channels;
    for n in 0..g.batch {
        let img = &input[n * g.in_h * g.in_w * c..(n + 1) * g.in_h * g.in_w * c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((n * g.out_h + oy) * g.out_w + ox) * patch;
                for ky in 0..g.kernel {
                    let Some(iy) = ConvGeom::source(oy, ky, g.stride, g.pad, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(ix) = ConvGeom::source(ox, kx, g.stride, g.pad, g.in_w) else {
                            continue;
                        };
                        let dst = row + (ky * g.kernel + kx) * c;
                        let src = (iy * g.in_w + ix) * c;
                        cols[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patches back into `[N, H, W, C]`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let patch = g.patch_len();
    let c = g.channels;
    for n in 0..g.batch {
        let img = &mut out[n * g.in_h * g.in_w * c..(n + 1) * g.in_h * g.in_w * c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((n * g.out_h + oy) * g.out_w + ox) * patch;
                for ky in 0..g.kernel {
                    let Some(iy) = ConvGeom::source(oy, ky, g.stride, g.pad, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(ix) = ConvGeom::source(ox, kx, g.stride, g.pad, g.in_w) else {
                            continue;
                        };
                        let src = row + (ky * g.kernel + kx) * c;
                        let dst = (iy * g.in_w + ix) * c;
                        for (o, &v) in img[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution, weights `[K, K, C]`.
pub(crate) fn depthwise_forward<T: Scalar>(input: &[T], weight: &[T], g: &ConvGeom, out: &mut [T]) {
    let c = g.channels;
    for n in 0..g.batch {
        let img = &input[n * g.in_h * g.in_w * c..];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((n * g.out_h + oy) * g.out_w + ox) * c;
                for ky in 0..g.kernel {
                    let Some(iy) = ConvGeom::source(oy, ky, g.stride, g.pad, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(ix) = ConvGeom::source(ox, kx, g.stride, g.pad, g.in_w) else {
                            continue;
                        };
                        let src = (iy * g.in_w + ix) * c;
                        let w = (ky * g.kernel + kx) * c;
                        for ch in 0..c {
                            out[o + ch] += img[src + ch] * weight[w + ch];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise_forward`] with respect to input and weight.
pub(crate) fn depthwise_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    grad_in: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
) {
    let c = g.channels;
    let mut grad_in = grad_in;
    let mut grad_w = grad_w;
    for n in 0..g.batch {
        let base = n * g.in_h * g.in_w * c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((n * g.out_h + oy) * g.out_w + ox) * c;
                for ky in 0..g.kernel {
                    let Some(iy) = ConvGeom::source(oy, ky, g.stride, g.pad, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(ix) = ConvGeom::source(ox, kx, g.stride, g.pad, g.in_w) else {
                            continue;
                        };
                        let src = base + (iy * g.in_w + ix) * c;
                        let w = (ky * g.kernel + kx) * c;
                        for ch in 0..c {
                            let go = grad_out[o + ch];
                            if let Some(gi) = grad_in.as_deref_mut() {
                                gi[src + ch] += go * weight[w + ch];
                            }
                            if let Some(gw) = grad_w.as_deref_mut() {
                                gw[w + ch] += go * input[src + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One output coordinate of a half-pixel (align_corners = false) bilinear
/// resample: the two source taps and their weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct LerpTap<T> {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: T,
    pub w_hi: T,
}

pub(crate) fn lerp_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<LerpTap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = src - lo as f64;
            let frac = if lo == hi { 0.0 } else { frac };
            LerpTap { lo, hi, w_lo: T::from_f64(1.0 - frac), w_hi: T::from_f64(frac) }
        })
        .collect()
}
