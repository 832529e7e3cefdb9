//! Minimal reverse-mode differentiable array engine.
//!
//! [`Tensor`] is plain row-major storage; differentiable computation is
//! recorded on a [`Tape`] and gradients are read back per [`Var`] after
//! [`Tape::backward`]. Everything is generic over [`Real`] so the same
//! graph can be evaluated in `f64` by [`finite_diff_check`].

pub mod container;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use tape::{BinaryOp, ReduceOp, Tape, UnaryOp, Var};
pub use tensor::{Real, Tensor};


/// Epsilon used by every channel-wise layer norm in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;
