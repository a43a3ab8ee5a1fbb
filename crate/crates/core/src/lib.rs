//! Time-equivariant multi-image super-resolution for irregularly sampled
//! image time series.

pub mod backbones;
pub mod datapipe;
pub mod diffusion;
pub mod encoding;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod sits;
pub mod trainer;

pub use error::{Error, Result};
