//! Core library: data model, networks, losses, training loop, and the
//! biometric evaluation harness.

pub mod data;
pub mod eval;
pub mod loss;
pub mod nets;
pub mod train;
pub mod error;

pub use error::{Error, Result};
