//! Soft tail-dropping adaptive tokenizer: a 1D image tokenizer whose
//! per-token keep probabilities let each image use as many tokens as its
//! content needs, plus a causal generator over the resulting codes.

pub mod allocation;
pub mod ar;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Result, StatError};
