//! Multi-modal equivalent transformer (image, text and fusion encoders) with
//! masked multimodal pretraining, supervised re-identification finetuning,
//! retrieval metrics and Grad-CAM export, at desk scale.

pub mod numerics;
pub mod data;
pub mod encoders;
pub mod params;
pub mod objectives;
pub mod training;
pub mod eval;
pub mod viz;
pub mod pipeline;
pub mod image;
pub mod text;
mod error;
pub mod rng;

pub use error::{Error, Result};
