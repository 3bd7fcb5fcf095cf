//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Parameters live in [`ParamStore`]s as plain [`Tensor`]s. A forward pass
//! binds them into a [`Tape`], records operations, and [`Tape::backward`]
//! replays the record in reverse. Gradients are accumulated back into the
//! store so the caller controls when they are zeroed.
//!
//! Everything is generic over [`Real`] so that the same network code can run
//! in `f32` for training and in `f64` for finite-difference checks.

mod check;
mod error;
mod optim;
mod real;
mod tape;
mod tensor;

pub use check::{gradient_check, gradient_check_params, numeric_gradient, relative_error};
pub use error::{DiffError, Result};
pub use optim::{clip_params, Adam, AdamConfig, RmsProp, RmsPropConfig};
pub use real::Real;
pub use tape::{BatchNormStats, Binary, Gradients, NormMode, Tape, Unary, Var};
pub use tensor::{ParamStore, Tensor};
