//! Attention-controllable image captioning and co-attention VQA on dense
//! grid features, with the metrics used to compare interface methods.

pub mod boxes;
pub mod captioner;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod interface;
pub mod lstm;
pub mod metrics;
pub mod render;
pub mod tensor;
pub mod text;
pub mod vqa;

pub use error::{Error, Result};
