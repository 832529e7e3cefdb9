//! Dual-head audio-visual alignment trained with mix-and-separate
//! objectives, evaluated on a procedurally generated world with known
//! ground truth.

pub mod config;
pub mod diffmath;
pub mod error;
pub mod evalsuite;
pub mod model;
pub mod objectives;
pub mod simvol;
pub mod synthworld;
pub mod trainer;

pub use diffmath::{Real, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use config::RunConfig;
