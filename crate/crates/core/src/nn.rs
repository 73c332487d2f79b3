//! Layer primitives: linear, convolutions, normalization, activations,
//! resampling and the classification loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

/// Kernel geometry of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Extra rows/cols appended to a transposed convolution's output.
    pub output_padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub depthwise: bool,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvSpec { kernel, stride, padding, output_padding: 0, in_channels, out_channels, depthwise: false }
    }

    /// 3×3, stride 1, padding 1, one filter per channel.
    pub fn depthwise3x3(channels: usize) -> Self {
        ConvSpec { depthwise: true, ..Self::new(3, 1, 1, channels, channels) }
    }

    pub fn transposed(kernel: usize, stride: usize, padding: usize, output_padding: usize, cin: usize, cout: usize) -> Self {
        ConvSpec { output_padding, ..Self::new(kernel, stride, padding, cin, cout) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::invalid("conv", "kernel and stride must be at least 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("conv", "channel counts must be positive"));
        }
        if self.depthwise && self.in_channels != self.out_channels {
            return Err(Error::invalid("conv", "depthwise convolution needs in_channels == out_channels"));
        }
        Ok(())
    }

    /// Spatial output size of the forward convolution.
    pub fn output_size(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {} larger than padded input {padded} (input {input}, padding {})", self.kernel, self.padding),
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Spatial output size of the transposed convolution.
    pub fn transposed_output_size(&self, input: usize) -> Result<usize> {
        if self.output_padding >= self.stride {
            return Err(Error::invalid(
                "conv_transpose2d",
                format!("output padding {} must be smaller than stride {}", self.output_padding, self.stride),
            ));
        }
        let full = (input - 1) * self.stride + self.kernel + self.output_padding;
        if full <= 2 * self.padding {
            return Err(Error::invalid("conv_transpose2d", "padding consumes the whole output"));
        }
        Ok(full - 2 * self.padding)
    }
}

/// Running statistics of a batch-norm layer. The affine scale and shift are
/// ordinary parameters and live in the [`ParamStore`](crate::ParamStore).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    Relu,
}

fn nhwc(op: &'static str, dims: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *dims {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::invalid(op, format!("expected [N, H, W, C], got {}", Shape::new(dims)))),
    }
}

fn expect_shape(op: &'static str, actual: &Shape, expected: &[usize]) -> Result<()> {
    if actual.dims() != expected {
        return Err(Error::ShapeMismatch { op, lhs: actual.clone(), rhs: Shape::new(expected) });
    }
    Ok(())
}

pub(crate) fn sum_rows<T: Scalar>(grad: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in grad.chunks_exact(cols) {
        for (o, &g) in out.iter_mut().zip(row) {
            *o += g;
        }
    }
    out
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Affine map over the last axis: `x[.., C_in] · w[C_in, C_out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        let cin = *dims.last().ok_or_else(|| Error::invalid("linear", "scalar input"))?;
        if wd.len() != 2 || wd[0] != cin {
            return Err(Error::ShapeMismatch { op: "linear", lhs: Shape(dims), rhs: Shape(wd) });
        }
        let cout = wd[1];
        if let Some(b) = b {
            expect_shape("linear bias", self.shape(b), &[cout])?;
        }
        let rows = dims.iter().product::<usize>() / cin;
        let mut out = vec![T::zero(); rows * cout];
        kernels::gemm(self.value(x).data(), self.value(w).data(), &mut out, rows, cin, cout);
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data());
        }
        self.add_macs(rows * cin * cout);
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = cout;
        let out = Tensor::from_parts(Shape(out_dims), out);
        Ok(self.push(out, Op::Linear { x, w, b, rows, cin, cout }))
    }

    /// Cross-correlation of `x[N, H, W, C_in]` with `w[K, K, C_in, C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        if spec.depthwise {
            return self.depthwise_conv2d(x, w, b, spec);
        }
        let (n, h, wd, c) = nhwc("conv2d", self.dims(x))?;
        if c != spec.in_channels {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: self.shape(x).clone(), rhs: Shape::new(&[spec.in_channels]) });
        }
        let k = spec.kernel;
        expect_shape("conv2d weight", self.shape(w), &[k, k, c, spec.out_channels])?;
        if let Some(b) = b {
            expect_shape("conv2d bias", self.shape(b), &[spec.out_channels])?;
        }
        let geom = ConvGeom {
            batch: n,
            in_h: h,
            in_w: wd,
            channels: c,
            out_h: spec.output_size(h)?,
            out_w: spec.output_size(wd)?,
            kernel: k,
            stride: spec.stride,
            pad: spec.padding,
        };
        let cout = spec.out_channels;
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![T::zero(); geom.rows() * cout];
        kernels::gemm(&cols, self.value(w).data(), &mut out, geom.rows(), geom.patch_len(), cout);
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data());
        }
        self.add_macs(geom.rows() * geom.patch_len() * cout);
        let out = Tensor::from_parts(Shape(vec![n, geom.out_h, geom.out_w, cout]), out);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cout }))
    }

    /// Per-channel convolution with weights `[K, K, C]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        if !spec.depthwise {
            return Err(Error::invalid("depthwise_conv2d", "spec is not depthwise"));
        }
        let (n, h, wd, c) = nhwc("depthwise_conv2d", self.dims(x))?;
        if c != spec.in_channels {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d",
                lhs: self.shape(x).clone(),
                rhs: Shape::new(&[spec.in_channels]),
            });
        }
        let k = spec.kernel;
        expect_shape("depthwise_conv2d weight", self.shape(w), &[k, k, c])?;
        if let Some(b) = b {
            expect_shape("depthwise_conv2d bias", self.shape(b), &[c])?;
        }
        let geom = ConvGeom {
            batch: n,
            in_h: h,
            in_w: wd,
            channels: c,
            out_h: spec.output_size(h)?,
            out_w: spec.output_size(wd)?,
            kernel: k,
            stride: spec.stride,
            pad: spec.padding,
        };
        let mut out = vec![T::zero(); geom.rows() * c];
        kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &geom, &mut out);
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data());
        }
        self.add_macs(geom.rows() * k * k * c);
        let out = Tensor::from_parts(Shape(vec![n, geom.out_h, geom.out_w, c]), out);
        Ok(self.push(out, Op::DepthwiseConv2d { x, w, b, geom }))
    }

    /// Transposed convolution of `x[N, H, W, C_in]` with `w[K, K, C_out, C_in]`.
    /// Output size is `(H − 1)·S − 2P + K + OP`. With this weight layout the
    /// op is exactly the input-gradient of [`Tape::conv2d`] for the same `w`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        let (n, h, wd, cin) = nhwc("conv_transpose2d", self.dims(x))?;
        if cin != spec.in_channels || spec.depthwise {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: self.shape(x).clone(),
                rhs: Shape::new(&[spec.in_channels]),
            });
        }
        let (k, cout) = (spec.kernel, spec.out_channels);
        expect_shape("conv_transpose2d weight", self.shape(w), &[k, k, cout, cin])?;
        if let Some(b) = b {
            expect_shape("conv_transpose2d bias", self.shape(b), &[cout])?;
        }
        let geom = ConvGeom {
            batch: n,
            in_h: spec.transposed_output_size(h)?,
            in_w: spec.transposed_output_size(wd)?,
            channels: cout,
            out_h: h,
            out_w: wd,
            kernel: k,
            stride: spec.stride,
            pad: spec.padding,
        };
        let mut cols = vec![T::zero(); geom.rows() * geom.patch_len()];
        kernels::gemm_nt(self.value(x).data(), self.value(w).data(), &mut cols, geom.rows(), cin, geom.patch_len());
        let mut out = vec![T::zero(); n * geom.in_h * geom.in_w * cout];
        kernels::col2im(&cols, &geom, &mut out);
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data());
        }
        self.add_macs(geom.rows() * geom.patch_len() * cin);
        let out = Tensor::from_parts(Shape(vec![n, geom.in_h, geom.in_w, cout]), out);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom, cin }))
    }

    /// Batch normalization over `N, H, W` per channel of `x[N, H, W, C]`.
    /// Training mode normalizes with batch statistics (biased variance) and
    /// updates the running estimates (unbiased variance); eval mode uses the
    /// running estimates.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        training: bool,
    ) -> Result<Var> {
        let (n, h, w, c) = nhwc("batchnorm2d", self.dims(x))?;
        if state.running_mean.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d",
                lhs: self.shape(x).clone(),
                rhs: Shape::new(&[state.running_mean.len()]),
            });
        }
        expect_shape("batchnorm2d gamma", self.shape(gamma), &[c])?;
        expect_shape("batchnorm2d beta", self.shape(beta), &[c])?;
        let m = n * h * w;
        let data = self.value(x).data();
        let (mean, inv_std) = if training {
            let mut mean = vec![T::zero(); c];
            for row in data.chunks_exact(c) {
                mean.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
            }
            let count = T::from_usize(m);
            mean.iter_mut().for_each(|s| *s /= count);
            let mut var = vec![T::zero(); c];
            for row in data.chunks_exact(c) {
                for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|s| *s /= count);
            let unbias = if m > 1 { count / T::from_usize(m - 1) } else { T::one() };
            let keep = T::one() - state.momentum;
            for ch in 0..c {
                state.running_mean[ch] = keep * state.running_mean[ch] + state.momentum * mean[ch];
                state.running_var[ch] = keep * state.running_var[ch] + state.momentum * var[ch] * unbias;
            }
            let inv_std = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect::<Vec<T>>();
            (mean, inv_std)
        } else {
            let inv_std = state.running_var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect::<Vec<T>>();
            (state.running_mean.clone(), inv_std)
        };
        let (xhat, out) = normalize_rows(data, &mean, &inv_std, self.value(gamma).data(), self.value(beta).data());
        let out = Tensor::from_parts(self.shape(x).clone(), out);
        let op = if training {
            Op::BatchNorm { x, gamma, beta, xhat, inv_std }
        } else {
            Op::FrozenNorm { x, gamma, beta, xhat, inv_std }
        };
        Ok(self.push(out, op))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let c = *dims.last().ok_or_else(|| Error::invalid("layernorm", "scalar input"))?;
        expect_shape("layernorm gamma", self.shape(gamma), &[c])?;
        expect_shape("layernorm beta", self.shape(beta), &[c])?;
        let eps = T::from_f64(LAYER_NORM_EPS);
        let count = T::from_usize(c);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = self.value(x).data();
        let rows = data.len() / c;
        let mut xhat = Vec::with_capacity(data.len());
        let mut out = Vec::with_capacity(data.len());
        let mut inv_stds = Vec::with_capacity(rows);
        for row in data.chunks_exact(c) {
            let mean = row.iter().copied().sum::<T>() / count;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv_std = T::one() / (var + eps).sqrt();
            inv_stds.push(inv_std);
            for (i, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv_std;
                xhat.push(xh);
                out.push(xh * g[i] + b[i]);
            }
        }
        let out = Tensor::from_parts(Shape(dims), out);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std: inv_stds }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Gelu => self.gelu(x),
            Activation::Relu => self.relu(x),
        }
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let signs: Vec<bool> = self.value(x).data().iter().map(|&v| v > T::zero()).collect();
        self.record_kinks(signs.into_iter());
        self.push(out, Op::Relu(x))
    }

    /// Softmax along the last axis with max subtraction.
    ///
    /// Rows containing `+inf` put equal mass on their `+inf` entries; rows
    /// that are entirely `-inf` come out uniform. NaN inputs propagate.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = *self.dims(x).last().ok_or_else(|| Error::invalid("softmax", "scalar input"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_row(row);
        }
        let out = Tensor::from_parts(self.shape(x).clone(), out);
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Half-pixel-centre (align_corners = false) bilinear resampling of
    /// `x[N, H, W, C]` to `[N, out_h, out_w, C]`.
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, h, w, c) = nhwc("bilinear_upsample", self.dims(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_upsample", "target size must be positive"));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(x);
        }
        let rows = kernels::lerp_taps::<T>(h, out_h);
        let cols = kernels::lerp_taps::<T>(w, out_w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * out_h * out_w * c];
        for b in 0..n {
            let img = &src[b * h * w * c..(b + 1) * h * w * c];
            for (oy, ry) in rows.iter().enumerate() {
                for (ox, rx) in cols.iter().enumerate() {
                    let o = ((b * out_h + oy) * out_w + ox) * c;
                    let taps = [
                        (ry.lo, rx.lo, ry.w_lo * rx.w_lo),
                        (ry.lo, rx.hi, ry.w_lo * rx.w_hi),
                        (ry.hi, rx.lo, ry.w_hi * rx.w_lo),
                        (ry.hi, rx.hi, ry.w_hi * rx.w_hi),
                    ];
                    for (iy, ix, wt) in taps {
                        let s = (iy * w + ix) * c;
                        for ch in 0..c {
                            out[o + ch] += wt * img[s + ch];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(Shape(vec![n, out_h, out_w, c]), out);
        Ok(self.push(out, Op::Bilinear { x }))
    }

    /// Mean over pixels of `−log softmax(logits)[label]`; `logits` is
    /// `[.., N_cls]` and `labels` holds one class index per pixel.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let dims = self.dims(logits);
        let classes = *dims.last().ok_or_else(|| Error::invalid("cross_entropy", "scalar logits"))?;
        let pixels = dims.iter().product::<usize>() / classes;
        if labels.len() != pixels {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: Shape::new(dims),
                rhs: Shape::new(&[labels.len()]),
            });
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(Error::invalid("cross_entropy", format!("label {l} at pixel {i} is not below {classes}")));
        }
        let data = self.value(logits).data();
        let mut probs = Vec::with_capacity(data.len());
        let mut total = T::zero();
        for (row, &label) in data.chunks_exact(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            total += sum.ln() + max - row[label as usize];
            probs.extend(row.iter().map(|&v| (v - max).exp() / sum));
        }
        let loss = total / T::from_usize(pixels);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }
}

fn normalize_rows<T: Scalar>(data: &[T], mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> (Vec<T>, Vec<T>) {
    let c = mean.len();
    let mut xhat = Vec::with_capacity(data.len());
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(c) {
        for ch in 0..c {
            let xh = (row[ch] - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(xh * gamma[ch] + beta[ch]);
        }
    }
    (xhat, out)
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::infinity() {
        let hits = T::from_usize(row.iter().filter(|&&v| v == T::infinity()).count());
        row.iter_mut().for_each(|v| *v = if *v == T::infinity() { T::one() / hits } else { T::zero() });
        return;
    }
    if max == T::neg_infinity() {
        let uniform = T::one() / T::from_usize(row.len());
        row.iter_mut().for_each(|v| *v = uniform);
        return;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub(crate) fn softmax_adjoint<T: Scalar>(y: &[T], grad_out: &[T], c: usize) -> Vec<T> {
    let mut g = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks_exact(c).zip(grad_out.chunks_exact(c)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        g.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    g
}

pub(crate) fn conv2d_adjoint<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    geom: &ConvGeom,
    cout: usize,
    need_x: bool,
    need_w: bool,
) -> [Option<Vec<T>>; 2] {
    let (rows, patch) = (geom.rows(), geom.patch_len());
    let gw = need_w.then(|| {
        let cols = kernels::im2col(x, geom);
        let mut gw = vec![T::zero(); patch * cout];
        kernels::gemm_tn(&cols, grad_out, &mut gw, patch, rows, cout);
        gw
    });
    let gx = need_x.then(|| {
        let mut dcols = vec![T::zero(); rows * patch];
        kernels::gemm_nt(grad_out, w, &mut dcols, rows, cout, patch);
        let mut gx = vec![T::zero(); x.len()];
        kernels::col2im(&dcols, geom, &mut gx);
        gx
    });
    [gx, gw]
}

pub(crate) fn conv_transpose2d_adjoint<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    geom: &ConvGeom,
    cin: usize,
    need_x: bool,
    need_w: bool,
) -> [Option<Vec<T>>; 2] {
    let (rows, patch) = (geom.rows(), geom.patch_len());
    let dcols = kernels::im2col(grad_out, geom);
    let gx = need_x.then(|| {
        let mut gx = vec![T::zero(); rows * cin];
        kernels::gemm(&dcols, w, &mut gx, rows, patch, cin);
        gx
    });
    let gw = need_w.then(|| {
        let mut gw = vec![T::zero(); patch * cin];
        kernels::gemm_tn(&dcols, x, &mut gw, patch, rows, cin);
        gw
    });
    [gx, gw]
}

pub(crate) fn batchnorm_adjoint<T: Scalar>(
    grad_out: &[T],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let m = T::from_usize(grad_out.len() / c);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (gr, xr) in grad_out.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            sum_g[ch] += gr[ch];
            sum_gx[ch] += gr[ch] * xr[ch];
        }
    }
    let mut gx = Vec::with_capacity(grad_out.len());
    for (gr, xr) in grad_out.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch] / m;
            gx.push(scale * (m * gr[ch] - sum_g[ch] - xr[ch] * sum_gx[ch]));
        }
    }
    (gx, sum_gx, sum_g)
}

pub(crate) fn frozen_norm_adjoint<T: Scalar>(
    grad_out: &[T],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let mut gg = vec![T::zero(); c];
    let mut gx = Vec::with_capacity(grad_out.len());
    for (gr, xr) in grad_out.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            gg[ch] += gr[ch] * xr[ch];
            gx.push(gr[ch] * gamma[ch] * inv_std[ch]);
        }
    }
    (gx, gg, sum_rows(grad_out, c))
}

pub(crate) fn layernorm_adjoint<T: Scalar>(
    grad_out: &[T],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let count = T::from_usize(c);
    let mut gg = vec![T::zero(); c];
    let mut gx = Vec::with_capacity(grad_out.len());
    for ((gr, xr), &is) in grad_out.chunks_exact(c).zip(xhat.chunks_exact(c)).zip(inv_std) {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for ch in 0..c {
            let d = gr[ch] * gamma[ch];
            sum_d += d;
            sum_dx += d * xr[ch];
            gg[ch] += gr[ch] * xr[ch];
        }
        for ch in 0..c {
            let d = gr[ch] * gamma[ch];
            gx.push(is / count * (count * d - sum_d - xr[ch] * sum_dx));
        }
    }
    (gx, gg, sum_rows(grad_out, c))
}

pub(crate) fn bilinear_adjoint<T: Scalar>(in_dims: &[usize], out_dims: &[usize], grad_out: &[T]) -> Vec<T> {
    let (n, h, w, c) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
    let (out_h, out_w) = (out_dims[1], out_dims[2]);
    let rows = kernels::lerp_taps::<T>(h, out_h);
    let cols = kernels::lerp_taps::<T>(w, out_w);
    let mut g = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        let img = &mut g[b * h * w * c..(b + 1) * h * w * c];
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, rx) in cols.iter().enumerate() {
                let o = ((b * out_h + oy) * out_w + ox) * c;
                let taps = [
                    (ry.lo, rx.lo, ry.w_lo * rx.w_lo),
                    (ry.lo, rx.hi, ry.w_lo * rx.w_hi),
                    (ry.hi, rx.lo, ry.w_hi * rx.w_lo),
                    (ry.hi, rx.hi, ry.w_hi * rx.w_hi),
                ];
                for (iy, ix, wt) in taps {
                    let s = (iy * w + ix) * c;
                    for ch in 0..c {
                        img[s + ch] += wt * grad_out[o + ch];
                    }
                }
            }
        }
    }
    g
}
