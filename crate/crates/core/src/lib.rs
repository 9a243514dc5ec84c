//! Cross-modal backward-compatible embedding training.
//!
//! A projection `φ` maps embeddings from a new encoder generation into the
//! space of an old one, so that galleries indexed with old embeddings stay
//! searchable by new queries. `φ` is pretrained on text alone and then
//! refined on image-text pairs while only adapters and normalization affines
//! move.

// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Result, XbtError};
pub use tensor::Matrix;

#[cfg(test)]
#[path = "../tests/common/gradcheck.rs"]
mod gradcheck;
