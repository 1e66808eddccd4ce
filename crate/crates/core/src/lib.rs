//! Color-only style transfer for 3D Gaussian Splatting scenes, driven by
//! losses in the self-attention space of a frozen latent-diffusion UNet.

pub mod attention;
pub mod backbone;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod renderer;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
pub use {candle_core, nalgebra};
