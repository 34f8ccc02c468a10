//! Neural feature fields from posed images with sparse-point geometry
//! supervision, and a sparse-voxel transformer biomass regressor.

pub mod bionet;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod fields;
pub mod loss;
pub mod parallel;
pub mod render;
pub mod train;

pub use error::{Error, Result};
