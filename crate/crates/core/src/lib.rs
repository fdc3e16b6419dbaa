//! Generalized zero-shot learning by multi-granularity semantic-visual
//! mutual adaption, built on a small double-precision autodiff engine.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dsvtm;
pub mod error;
pub mod eval;
pub mod granularity;
pub mod model;
pub mod par;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
