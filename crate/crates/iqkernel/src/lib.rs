//! Integer-only quantized inference kernels.
//!
//! The crate provides the building blocks for running a transformer block
//! entirely in integer arithmetic: uniform affine quantization onto dyadic
//! scales, a dynamic integer matmul with closed-form output requantization,
//! shift-only nonlinear operators (exponential, clipped softmax,
//! normalization, gated activation), a channel-smoothing calibration
//! procedure, and a toy block runtime that pairs the integer path with a
//! float reference path for verification.

pub mod block;
pub mod error;
pub mod fsbr;
pub mod gen;
pub mod intmath;
pub mod manifest;
pub mod matmul;
pub mod nonlinear;
pub mod quant;
pub mod report;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
pub use quant::{dequantize, quantize, DyadicScale, Granularity, QuantTensor};
pub use tensor::FloatTensor;
