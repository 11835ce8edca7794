//! File formats: weights, run configuration and PGM images.

pub mod config;
pub mod pgm;
pub mod weights;
