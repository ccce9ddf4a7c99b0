//! Weakly supervised cropland mapping from satellite image time series.
//!
//! Labels come from the agreement of several existing land-cover products;
//! a U-Net with lightweight temporal attention is trained on the agreeing
//! pixels with a masked cross-entropy, regularized on all pixels by a
//! KL-divergence feature-similarity term.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod loss;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod sits;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
