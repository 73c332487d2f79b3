//! Core of `cdkit`: a Siamese hierarchical-transformer change detector built
//! on a small dense tensor library with define-by-run reverse-mode autodiff.
//!
//! Everything here is `no_std` + `alloc`. File formats, dataset IO and the
//! command line live in the `cdkit` crate.
//!
//! Layout conventions: images and feature maps are channel-last `[N, H, W, C]`,
//! token sequences are `[N, H*W, C]`, and all storage is row-major.

#![no_std]

extern crate alloc;

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod layers;
mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
#[cfg(test)]
mod testutil;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Session};
pub use tape::{Tape, Var};
pub use tensor::{DType, Scalar, Shape, Tensor};
