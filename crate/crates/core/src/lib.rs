//! Cross-modal consistency training for a shared vision transformer.
//!
//! A single transformer sees paired white-light (WL) and narrow-band (NBI)
//! images. Training adds a cosine alignment loss between the two class
//! tokens and a spatial-attention alignment loss between their class-to-patch
//! response maps; inference keeps only the backbone and classifies WL images.

pub mod align;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck_model;
pub mod image;
pub mod model;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
