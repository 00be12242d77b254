//! Minimal dense-tensor library with tape-based reverse-mode differentiation
//! and an Adam optimizer. Every trainable network in `humanrf` is built on it.

pub mod adam;
mod error;
pub mod gradcheck;
pub mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, LrSchedule};
pub use error::{AutodiffError, Result};
pub use params::{Bound, GradSet, Init, Param, ParamId, ParameterSet};
pub use real::Real;
pub use tape::{sigmoid, softplus, Tape, Var, MASKED_LOGIT};
pub use tensor::Tensor;
