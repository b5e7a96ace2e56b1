//! Task embeddings for labeled datasets and black-box models, computed in one
//! parameter space defined by a shared surrogate model.

mod error;
pub mod benchmarks;
pub mod extractors;
pub mod label;
pub mod oracles;
pub mod pipeline;
pub mod store;
pub mod surrogate;

pub use error::{Error, Result};
