//! Desk-scale toolkit for optimizing a toy learned image compression codec:
//! quantization-aware training with calibrated range control, progressive
//! mixed-precision bit-width search, GDN channel slimming, bit-exact integer
//! inference simulation, and rate-distortion evaluation.
//!
//! Everything numeric is generic over the scalar type ([`Scalar`]): `f32`
//! for training runs, `f64` for verification suites. Concrete aliases are
//! exported at the crate root.

pub mod codec;
pub mod draq;
pub mod error;
pub mod gdn;
pub mod gradcheck;
pub mod graph;
pub mod hwopt;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type TensorF32 = tensor::Tensor<f32>;
/// Verification-precision tensor.
pub type TensorF64 = tensor::Tensor<f64>;
/// Training-precision model.
pub type ModelF32 = codec::Model<f32>;
/// Verification-precision model.
pub type ModelF64 = codec::Model<f64>;
