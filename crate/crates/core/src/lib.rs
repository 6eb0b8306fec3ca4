//! Open-world co-salient object detection toolkit.

pub mod config;
pub mod datamodel;
pub mod error;
pub mod gsem;
pub mod metrics;
pub mod owdata;
pub mod nn;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
