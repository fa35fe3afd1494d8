//! Dense CPU tensors with a tape-based reverse-mode autodiff.
//!
//! Values are recorded on a [`Tape`] as operations run; [`Tape::backward`]
//! replays the tape in reverse. Model parameters live in a [`ParamStore`]
//! and are placed on a tape per forward pass through a [`Binding`].
//!
//! Operations panic on shape mismatches. Callers that accept external
//! input validate shapes before building a graph.

mod error;
mod float;
pub mod gradcheck;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use float::Float;
pub use optim::{Adam, AdamConfig};
pub use params::{Binding, ParamId, ParamKind, ParamStore, Scope};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
