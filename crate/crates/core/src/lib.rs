//! Character-level transformer training engine.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod session;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
