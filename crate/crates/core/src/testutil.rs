//! Helpers shared by unit tests.

use alloc::vec::Vec;

use crate::rng::{rng_for, standard_normal};
use crate::tensor::{Scalar, Tensor};

pub fn randn<T: Scalar>(dims: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = rng_for(seed, &[0x7e57]);
    let n = dims.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(standard_normal(&mut rng))).collect();
    Tensor::from_vec(dims, data).unwrap()
}

pub fn tensor(dims: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::from_f64_slice(dims, values).unwrap()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}
