//! Tensor-decomposed (TD) and randomly-shuffled tensor-decomposed (RsTD)
//! convolution layers, with a small from-scratch CNN stack, a CIFAR-10
//! pipeline and an SGD trainer for compression-ratio experiments.

pub mod data;
pub mod error;
pub mod exec;
pub mod nn;
pub mod scalar;
pub mod shuffle;
pub mod tdmodel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::ExecMode;
pub use scalar::{Precision, Scalar};
pub use tensor::DenseTensor;
