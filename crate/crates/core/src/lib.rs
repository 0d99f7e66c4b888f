//! Point-based drag editing by optimizing a diffusion U-Net's bottleneck
//! feature and propagating it through later denoising steps, on a toy
//! pixel-space model trained on synthetic ring images.
//!
//! All numeric code is generic over [`Scalar`] (`f32` and `f64`); the
//! aliases below fix the production precision.

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod diffusion;
pub mod drag;
pub mod error;
pub mod metrics;
pub mod probe;
pub mod scalar;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Production tensor type.
pub type Tensor = tensor::Tensor<f32>;
/// Double precision tensor, used by gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
