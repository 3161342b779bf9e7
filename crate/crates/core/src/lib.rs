//! Desk-scale self-supervised representation learning.
//!
//! The crate provides a tape-based reverse-mode autodiff engine over dense
//! tensors, a small convolutional encoder with projector/predictor heads,
//! a two-stage (weak then aggressive) augmentation pipeline, the
//! re-weighted four-pair training objective with its cosine β decay,
//! baseline training modes, and a linear-probe evaluation harness. All
//! randomness is derived from explicit seeds; runs are bit-reproducible.

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kv;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Elem, Tensor, TensorId, DTYPE};
