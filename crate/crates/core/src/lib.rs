//! Reflection removal from four-angle polarization images.
//!
//! A mixed capture `I_φ = R_φ + T_φ` at φ ∈ {0°, 45°, 90°, 135°} is split
//! into its reflection and transmission quads by a recurrent U-Net pair
//! (R-net with a ConvLSTM bottleneck, T-net conditioned on the current
//! reflection estimate).
//!
//! * [`polarimetry`]: Stokes parameters, DoP/AoP, Malus synthesis.
//! * [`preprocess`]: overexposure mask, difference images, network input.
//! * [`model`]: the separation network on a reverse-mode [`autodiff`] tape.
//! * [`losses`]: pixel, perceptual and polarized NCC terms.
//! * [`data`]: scene layout on disk and the synthetic scene generator.
//! * [`evalharness`]: rescaling, PSNR/SSIM and the ablation runner.
//! * [`config`], [`checkpoint`], [`train`]: run configuration, persistence
//!   and the training loop.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evalharness;
pub mod features;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod polarimetry;
pub mod preprocess;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image32 = image::Image<f32>;
pub type Image64 = image::Image<f64>;
pub type Tensor32 = image::Tensor<f32>;
pub type Tensor64 = image::Tensor<f64>;
pub type Quad32 = polarimetry::PolarizedQuad<f32>;
pub type Quad64 = polarimetry::PolarizedQuad<f64>;
pub type Rp2pn32 = model::Rp2pn<f32>;
pub type Rp2pn64 = model::Rp2pn<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
