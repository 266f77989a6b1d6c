//! Learned acoustic scattering at desk scale: random convex scatterers, a 2D
//! finite-difference wave solver, octave-band loudness encoding, binary
//! dataset shards, and training/evaluation of a full-resolution residual
//! network that maps occupancy images to loudness fields.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod kv;
pub mod render;
pub mod solver;
pub mod train;

pub use error::{Error, Result};
