//! Quadratic neural networks: tensors, quadratic layers, model building,
//! training and diagnostics.

pub mod autobuild;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod quadneuron;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
