//! Blind image deconvolution with a GAN kernel prior, a latent kernel
//! initializer and a deep image prior.

pub mod autodiff;
pub mod blur;
pub mod cli;
pub mod dip;
pub mod error;
pub mod gan;
pub mod metrics;
pub mod initializer;
pub mod inversion;
pub mod io;
mod layers;
pub mod params;
pub mod scenes;
pub mod solver;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
