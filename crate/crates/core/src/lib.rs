//! Latent dynamic diffusion for image-to-video synthesis on small clips.

pub mod autoencoder;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod synthesis;
pub mod tensor;
pub mod video;

pub use error::{LddmError, Result};
