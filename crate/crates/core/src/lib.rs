//! Spatially conditioned adversarial latent autoencoder (SCALAE) at desk scale.

pub mod dataset;
pub mod error;
pub mod imagery;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
