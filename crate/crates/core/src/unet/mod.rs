//! Noise-prediction network.

pub mod blocks;
mod config;
mod embedding;
mod model;

pub use blocks::{AttnBlock, Init, ParamSpec, ResBlock};
pub use config::UNetConfig;
pub use embedding::{timestep_batch, timestep_embedding};
pub use model::UNet;
