//! Quantized inference for small CNNs with three ways of choosing the output
//! quantization parameters of every layer: fixed from calibration (static),
//! measured on the widened output (dynamic), or predicted from the layer input
//! through surrogate moment estimates (probabilistic).

pub mod corruptions;
pub mod desk;
pub mod costmodel;
pub mod error;
pub mod geometry;
pub mod intkernel;
pub mod nn;
pub mod quant;
pub mod schemes;
pub mod surrogate;
pub mod tensor;

pub use error::{Error, Result};
pub use quant::{Granularity, ParamSet, QuantParams, QuantizedTensor};
pub use tensor::{Shape, Tensor};
