//! The end-to-end detector: encoders, fusion stack, detection head, training.

pub mod attention;
pub mod encoder;
pub mod head;
pub mod synth;
pub mod model;
pub mod train;
