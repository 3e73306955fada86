//! Minimal reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! A [`Tape`] records operations as they execute and replays them backwards
//! to produce gradients for every named parameter. Parameter collections
//! ([`ParamSet`]) keep a canonical order so gradients can be flattened into
//! single vectors for dot products and cosine similarities.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod params;
pub mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use params::{
    cosine_similarity, flatten_grads, sgd_step, unflatten_grads, Bound, GradVector, Gradients,
    ParamSet, StepStats,
};
pub use tape::{softmax_in_place, OpKind, Tape, Var};
pub use tensor::Tensor;
