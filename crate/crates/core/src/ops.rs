//! Tensor algebra on the tape: elementwise arithmetic, reductions, matrix
//! products and layout ops (reshape, permute, concat, narrow).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

impl<T: Scalar> Tape<T> {
    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() });
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(sa.clone(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let total: T = t.data().iter().copied().sum();
        let mean = total / T::from_usize(t.numel());
        self.push(Tensor::scalar(mean), Op::Mean(x))
    }

    /// Matrix product over the last two axes. `a` is `[.., m, k]`; `b` is
    /// either `[k, n]` (shared across the batch) or `[.., k, n]` with the same
    /// leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: Shape::new(da), rhs: Shape::new(db) };
        if da.len() < 2 || db.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (da[da.len() - 2], da[da.len() - 1]);
        let (kb, n) = (db[db.len() - 2], db[db.len() - 1]);
        let lead = &da[..da.len() - 2];
        let rhs_batched = db.len() > 2;
        if kb != k || (rhs_batched && &db[..db.len() - 2] != lead) {
            return Err(mismatch());
        }
        let batch: usize = lead.iter().product();
        let mut out_dims = lead.to_vec();
        out_dims.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let b_off = if rhs_batched { bi * k * n } else { 0 };
            kernels::gemm(
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[b_off..b_off + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.add_macs(batch * m * k * n);
        let out = Tensor::from_parts(Shape(out_dims), out);
        Ok(self.push(out, Op::MatMul { a, b, batch, m, k, n, rhs_batched }))
    }

    /// `a[.., m, k] · b[.., n, k]ᵀ` with identical leading axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        let mismatch = || Error::ShapeMismatch { op: "matmul_nt", lhs: Shape::new(da), rhs: Shape::new(db) };
        if da.len() < 2 || da.len() != db.len() || da[..da.len() - 2] != db[..db.len() - 2] {
            return Err(mismatch());
        }
        let (m, k) = (da[da.len() - 2], da[da.len() - 1]);
        let (n, kb) = (db[db.len() - 2], db[db.len() - 1]);
        if kb != k {
            return Err(mismatch());
        }
        let batch: usize = da[..da.len() - 2].iter().product();
        let mut out_dims = da[..da.len() - 2].to_vec();
        out_dims.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            kernels::gemm_nt(
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[bi * n * k..(bi + 1) * n * k],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.add_macs(batch * m * k * n);
        let out = Tensor::from_parts(Shape(out_dims), out);
        Ok(self.push(out, Op::MatMulNt { a, b, batch, m, k, n }))
    }

    /// Reinterprets the row-major buffer under a new shape.
    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        if shape == *self.shape(x) {
            return Ok(x);
        }
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let dims = self.dims(x);
        let mut seen = vec![false; dims.len()];
        if axes.len() != dims.len() || axes.iter().any(|&a| a >= dims.len() || core::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", alloc::format!("{axes:?} is not a permutation of {} axes", dims.len())));
        }
        let out = permute_data(dims, axes, self.value(x).data());
        let out_dims = axes.iter().map(|&a| dims[a]).collect();
        let out = Tensor::from_parts(Shape(out_dims), out);
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::invalid("concat", "no inputs"));
        };
        if inputs.len() == 1 {
            return Ok(first);
        }
        let base = self.dims(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", alloc::format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let d = self.dims(v);
            let compatible = d.len() == base.len()
                && d.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch { op: "concat", lhs: Shape(base), rhs: Shape::new(d) });
            }
            total += d[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.dims(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_dims = base;
        out_dims[axis] = total;
        let out = Tensor::from_parts(Shape(out_dims), out);
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return Err(Error::invalid(
                "narrow",
                alloc::format!("range {start}..{} on axis {axis} of {}", start + len, Shape(dims)),
            ));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dims[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_dims = dims;
        out_dims[axis] = len;
        let out = Tensor::from_parts(Shape(out_dims), out);
        Ok(self.push(out, Op::Narrow { x, axis, start }))
    }
}

fn permute_data<T: Copy>(dims: &[usize], axes: &[usize], src: &[T]) -> Vec<T> {
    let rank = dims.len();
    let in_strides = Shape::new(dims).strides();
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn permute_adjoint<T: Copy>(in_dims: &[usize], axes: &[usize], grad_out: &[T]) -> Vec<T> {
    let out_dims: Vec<usize> = axes.iter().map(|&a| in_dims[a]).collect();
    let mut inverse = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    permute_data(&out_dims, &inverse, grad_out)
}

pub(crate) fn concat_adjoint<T: Scalar>(shapes: &[&[usize]], axis: usize, grad_out: &[T]) -> Vec<Vec<T>> {
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let total: usize = shapes.iter().map(|d| d[axis]).sum();
    let mut grads: Vec<Vec<T>> = shapes.iter().map(|d| Vec::with_capacity(d.iter().product())).collect();
    for o in 0..outer {
        let mut offset = o * total * inner;
        for (g, d) in grads.iter_mut().zip(shapes) {
            let chunk = d[axis] * inner;
            g.extend_from_slice(&grad_out[offset..offset + chunk]);
            offset += chunk;
        }
    }
    grads
}

pub(crate) fn narrow_adjoint<T: Scalar>(
    in_dims: &[usize],
    out_dims: &[usize],
    axis: usize,
    start: usize,
    grad_out: &[T],
) -> Vec<T> {
    let outer: usize = in_dims[..axis].iter().product();
    let inner: usize = in_dims[axis + 1..].iter().product();
    let len = out_dims[axis];
    let mut g = vec![T::zero(); in_dims.iter().product()];
    for o in 0..outer {
        let dst = (o * in_dims[axis] + start) * inner;
        let src = o * len * inner;
        g[dst..dst + len * inner].copy_from_slice(&grad_out[src..src + len * inner]);
    }
    g
}

type MatmulDims = (usize, usize, usize, usize, bool);

pub(crate) fn matmul_adjoint<T: Scalar>(
    a: &[T],
    b: &[T],
    grad_out: &[T],
    (batch, m, k, n, rhs_batched): MatmulDims,
    (need_a, need_b): (bool, bool),
) -> [Option<Vec<T>>; 2] {
    let ga = need_a.then(|| {
        let mut ga = vec![T::zero(); batch * m * k];
        for bi in 0..batch {
            let b_off = if rhs_batched { bi * k * n } else { 0 };
            kernels::gemm_nt(
                &grad_out[bi * m * n..(bi + 1) * m * n],
                &b[b_off..b_off + k * n],
                &mut ga[bi * m * k..(bi + 1) * m * k],
                m,
                n,
                k,
            );
        }
        ga
    });
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); if rhs_batched { batch * k * n } else { k * n }];
        for bi in 0..batch {
            let b_off = if rhs_batched { bi * k * n } else { 0 };
            kernels::gemm_tn(
                &a[bi * m * k..(bi + 1) * m * k],
                &grad_out[bi * m * n..(bi + 1) * m * n],
                &mut gb[b_off..b_off + k * n],
                k,
                m,
                n,
            );
        }
        gb
    });
    [ga, gb]
}

pub(crate) fn matmul_nt_adjoint<T: Scalar>(
    a: &[T],
    b: &[T],
    grad_out: &[T],
    (batch, m, k, n): (usize, usize, usize, usize),
    (need_a, need_b): (bool, bool),
) -> [Option<Vec<T>>; 2] {
    let ga = need_a.then(|| {
        let mut ga = vec![T::zero(); batch * m * k];
        for bi in 0..batch {
            kernels::gemm(
                &grad_out[bi * m * n..(bi + 1) * m * n],
                &b[bi * n * k..(bi + 1) * n * k],
                &mut ga[bi * m * k..(bi + 1) * m * k],
                m,
                n,
                k,
            );
        }
        ga
    });
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); batch * n * k];
        for bi in 0..batch {
            kernels::gemm_tn(
                &grad_out[bi * m * n..(bi + 1) * m * n],
                &a[bi * m * k..(bi + 1) * m * k],
                &mut gb[bi * n * k..(bi + 1) * n * k],
                n,
                m,
                k,
            );
        }
        gb
    });
    [ga, gb]
}
