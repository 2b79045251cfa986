//! The shared vision transformer backbone.

mod config;
mod model;
pub mod params;

pub use config::ModelConfig;
pub use model::{argmax, patchify, BackboneOutput, BoundVit, Inference, Modality, Vit};
pub use params::{ParamId, ParamStore};
