//! Two-stage traffic sign detection: a dense multi-scale proposal network,
//! a feature-fusion classifier, post-processing and evaluation.

pub mod cli;
pub mod data;
pub mod dmsnet;
pub mod error;
pub mod eval;
pub mod fusionnet;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Shape, Tensor};
