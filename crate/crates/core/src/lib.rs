//! Spoken-language identification toolkit: log-mel features, a TDNN encoder
//! with attentive pooling, cosine margin heads, AdamW training, augmentation,
//! scoring and evaluation metrics, plus a synthetic corpus generator.

pub mod augment;
pub mod encoder;
pub mod error;
pub mod features;
pub mod heads;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod scoring;
pub mod synthkit;
pub mod tensor;

pub use error::{Error, Result};
