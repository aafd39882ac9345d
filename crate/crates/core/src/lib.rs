//! Dynamic Mobile-Former.
//!
//! A hybrid CNN/transformer backbone in which every convolution of the mobile
//! block is a *dynamic residual* convolution: an input-agnostic kernel plus a
//! score-weighted sum of `K` zero-initialized static kernels, with the scores
//! computed from pooled features and the first of a handful of global tokens.
//!
//! The crate carries its own small reverse-mode autodiff core ([`tensor`]),
//! the layers ([`dyconv`], [`attention`], [`blocks`]), model assembly and
//! analysis ([`model`], [`flops`], [`checkpoint`]) and a toy-scale training
//! harness ([`train`]).

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod dyconv;
pub mod error;
pub mod flops;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use tensor::{no_grad, DType, Element, Tensor};
