//! Module power prediction from photoluminescence images.
//!
//! Everything needed to go from a PL image of a photovoltaic module to a
//! predicted maximum power and a per-cell power loss map: a small reverse-
//! mode tensor engine, a fully convolutional regression network with two
//! interchangeable heads, a synthetic image generator with exact ground
//! truth, the data/training/evaluation pipeline, and binary checkpoints.

pub mod data;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imgio;
pub mod model;
pub mod par;
pub mod powermap;
pub mod runconfig;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
