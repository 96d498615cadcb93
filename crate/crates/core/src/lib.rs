//! Synthetic RF spectrogram generation with a denoising diffusion model.

pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod numerics;
pub mod rfscene;
pub mod transfer;
pub mod unet;

pub use error::{Error, Result};
