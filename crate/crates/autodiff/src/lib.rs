//! Dense `f64` tensors, tape-based reverse-mode differentiation and Adam.
//!
//! Everything here is deterministic: reductions run in a fixed order and the
//! only source of randomness is the seeded [`Rng`].

mod adam;
mod grad;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use grad::{eval, finite_diff_grad, finite_diff_grad5, max_relative_error, objective, single, value_and_grad};
pub use params::ParamVector;
pub use rng::{mix, Rng};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value produced by `{primitive}`")]
    Numeric { primitive: &'static str },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
