//! Define-by-run gradient tape.
//!
//! Every differentiable op appends a node holding its output value and an
//! [`Op`] record of its inputs plus whatever it saved for the adjoint.
//! [`Tape::backward`] walks the nodes once in reverse creation order, which
//! is a valid topological order because inputs always precede outputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    /// `a[b, m, k] · b[b?, k, n]`; `rhs_batched` false means `b` is `[k, n]`.
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, rhs_batched: bool },
    /// `a[b, m, k] · b[b, n, k]ᵀ`
    MatMulNt { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, cin: usize, cout: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cout: usize },
    DepthwiseConv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    /// `geom` describes the equivalent forward convolution from output to input.
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cin: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    FrozenNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    Bilinear { x: Var },
    CrossEntropy { logits: Var, labels: Vec<u8>, probs: Vec<T> },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::FrozenNorm { .. } => "batchnorm2d_eval",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Bilinear { .. } => "bilinear_upsample",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Sum(x) | Op::Mean(x) | Op::Reshape(x) => vec![*x],
            Op::Gelu(x) | Op::Relu(x) | Op::Softmax(x) => vec![*x],
            Op::MatMul { a, b, .. } | Op::MatMulNt { a, b, .. } => vec![*a, *b],
            Op::Permute { x, .. } | Op::Narrow { x, .. } | Op::Bilinear { x } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Linear { x, w, b, .. }
            | Op::Conv2d { x, w, b, .. }
            | Op::DepthwiseConv2d { x, w, b, .. }
            | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. }
            | Op::FrozenNorm { x, gamma, beta, .. }
            | Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations. One tape per forward pass; it is
/// not shared between threads.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    macs: u64,
    sign_flips: Vec<&'static str>,
    kink_hash: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), macs: 0, sign_flips: Vec::new(), kink_hash: 0xcbf2_9ce4_8422_2325 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are kept only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// reachable and tracks gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).clone(), g.clone()))
    }

    /// Multiply-accumulate operations executed so far by products and
    /// convolutions recorded on this tape.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Fingerprint of which side of zero every ReLU input fell on. Two
    /// forward passes with equal fingerprints ran through the same linear
    /// pieces.
    pub fn kink_fingerprint(&self) -> u64 {
        self.kink_hash
    }

    pub(crate) fn record_kinks(&mut self, positive: impl Iterator<Item = bool>) {
        for p in positive {
            self.kink_hash = (self.kink_hash ^ p as u64).wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn add_macs(&mut self, n: usize) {
        self.macs += n as u64;
    }

    /// Test fixture: negates every input gradient produced by ops named
    /// `op_name` during backward.
    pub fn inject_sign_flip(&mut self, op_name: &'static str) {
        self.sign_flips.push(op_name);
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        // Ops over constants only need no record of how they were built.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate additively
    /// over every use of a tensor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).clone();
        if shape.numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = self.grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::Leaf) {
                let flip = self.sign_flips.contains(&node.op.name());
                let contributions = self.adjoint(idx, &grad_out);
                for (input, mut g) in contributions {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    if flip {
                        g.iter_mut().for_each(|v| *v = -*v);
                    }
                    match &mut self.grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            self.grads[idx] = Some(grad_out);
        }
        Ok(())
    }

    /// Input-gradient contributions of node `idx` given its output gradient.
    fn adjoint(&self, idx: usize, grad_out: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, grad_out.to_vec()), (*b, grad_out.to_vec())],
            Op::Sub(a, b) => {
                vec![(*a, grad_out.to_vec()), (*b, grad_out.iter().map(|&g| -g).collect())]
            }
            Op::Mul(a, b) => {
                let ga = grad_out.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                let gb = grad_out.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, grad_out.iter().map(|&g| g * *s).collect())],
            Op::Sum(x) => vec![(*x, vec![grad_out[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![grad_out[0] / T::from_usize(n); n])]
            }
            Op::Reshape(x) => vec![(*x, grad_out.to_vec())],
            Op::MatMul { a, b, batch, m, k, n, rhs_batched } => crate::ops::matmul_adjoint(
                val(*a),
                val(*b),
                grad_out,
                (*batch, *m, *k, *n, *rhs_batched),
                (needs(*a), needs(*b)),
            )
            .into_iter()
            .zip([*a, *b])
            .filter_map(|(g, v)| g.map(|g| (v, g)))
            .collect(),
            Op::MatMulNt { a, b, batch, m, k, n } => crate::ops::matmul_nt_adjoint(
                val(*a),
                val(*b),
                grad_out,
                (*batch, *m, *k, *n),
                (needs(*a), needs(*b)),
            )
            .into_iter()
            .zip([*a, *b])
            .filter_map(|(g, v)| g.map(|g| (v, g)))
            .collect(),
            Op::Permute { x, axes } => {
                vec![(*x, crate::ops::permute_adjoint(self.dims(*x), axes, grad_out))]
            }
            Op::Concat { inputs, axis } => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.dims(*v)).collect();
                crate::ops::concat_adjoint(&shapes, *axis, grad_out)
                    .into_iter()
                    .zip(inputs.iter().copied())
                    .map(|(g, v)| (v, g))
                    .collect()
            }
            Op::Narrow { x, axis, start } => vec![(
                *x,
                crate::ops::narrow_adjoint(self.dims(*x), node.value.dims(), *axis, *start, grad_out),
            )],
            Op::Linear { x, w, b, rows, cin, cout } => {
                let mut out = Vec::new();
                if needs(*x) {
                    let mut gx = vec![T::zero(); rows * cin];
                    crate::kernels::gemm_nt(grad_out, val(*w), &mut gx, *rows, *cout, *cin);
                    out.push((*x, gx));
                }
                if needs(*w) {
                    let mut gw = vec![T::zero(); cin * cout];
                    crate::kernels::gemm_tn(val(*x), grad_out, &mut gw, *cin, *rows, *cout);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    out.push((*b, crate::nn::sum_rows(grad_out, *cout)));
                }
                out
            }
            Op::Conv2d { x, w, b, geom, cout } => {
                crate::nn::conv2d_adjoint(val(*x), val(*w), grad_out, geom, *cout, needs(*x), needs(*w))
                    .into_iter()
                    .zip([*x, *w])
                    .filter_map(|(g, v)| g.map(|g| (v, g)))
                    .chain(b.map(|b| (b, crate::nn::sum_rows(grad_out, *cout))))
                    .collect()
            }
            Op::DepthwiseConv2d { x, w, b, geom } => {
                let mut gx = needs(*x).then(|| vec![T::zero(); self.value(*x).numel()]);
                let mut gw = needs(*w).then(|| vec![T::zero(); self.value(*w).numel()]);
                crate::kernels::depthwise_backward(
                    val(*x),
                    val(*w),
                    grad_out,
                    geom,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                [(*x, gx), (*w, gw)]
                    .into_iter()
                    .filter_map(|(v, g)| g.map(|g| (v, g)))
                    .chain(b.map(|b| (b, crate::nn::sum_rows(grad_out, geom.channels))))
                    .collect()
            }
            Op::ConvTranspose2d { x, w, b, geom, cin } => crate::nn::conv_transpose2d_adjoint(
                val(*x),
                val(*w),
                grad_out,
                geom,
                *cin,
                needs(*x),
                needs(*w),
            )
            .into_iter()
            .zip([*x, *w])
            .filter_map(|(g, v)| g.map(|g| (v, g)))
            .chain(b.map(|b| (b, crate::nn::sum_rows(grad_out, geom.channels))))
            .collect(),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (gx, gg, gb) =
                    crate::nn::batchnorm_adjoint(grad_out, val(*gamma), xhat, inv_std);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::FrozenNorm { x, gamma, beta, xhat, inv_std } => {
                let (gx, gg, gb) =
                    crate::nn::frozen_norm_adjoint(grad_out, val(*gamma), xhat, inv_std);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (gx, gg, gb) =
                    crate::nn::layernorm_adjoint(grad_out, val(*gamma), xhat, inv_std);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Gelu(x) => vec![(
                *x,
                val(*x).iter().zip(grad_out).map(|(&v, &g)| g * crate::nn::gelu_derivative(v)).collect(),
            )],
            Op::Relu(x) => vec![(
                *x,
                val(*x)
                    .iter()
                    .zip(grad_out)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )],
            Op::Softmax(x) => {
                let c = *self.dims(*x).last().unwrap_or(&1);
                vec![(*x, crate::nn::softmax_adjoint(node.value.data(), grad_out, c))]
            }
            Op::Bilinear { x } => {
                vec![(*x, crate::nn::bilinear_adjoint(self.dims(*x), node.value.dims(), grad_out))]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = *self.dims(*logits).last().unwrap_or(&1);
                let scale = grad_out[0] / T::from_usize(labels.len());
                let mut g = probs.clone();
                for (p, &l) in labels.iter().enumerate() {
                    g[p * c + l as usize] -= T::one();
                }
                g.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, g)]
            }
        }
    }
}
