//! Decomposition of superimposed two-channel images with hierarchical
//! (variational) autoencoders and lateral contextualization: synthetic data
//! generation, training, tiled large-image inference, and evaluation.

pub mod datagen;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pyramid;
pub mod tensor;
pub mod tiffio;
pub mod tiling;
pub mod train;

pub use error::{DemixError, Result};
