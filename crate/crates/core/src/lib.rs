//! Binarization-aware neural network training and inference toolkit:
//! kurtosis-driven bi-modal weight shaping, weight-distribution-mimicking
//! teacher-student training, and an exact bit-packed XNOR-popcount
//! inference engine, all driven by a CLI at desk scale.

pub mod binarize;
pub mod distill;
pub mod error;
pub mod kurtosis;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
