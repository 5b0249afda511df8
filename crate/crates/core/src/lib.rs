//! Relighting-based data augmentation toolkit.

pub mod augment;
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod manifest;
pub mod model;
pub mod probe;
pub mod synth;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
