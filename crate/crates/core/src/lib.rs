//! Fine-tuning adaptation toolkit for autoregressive text-line recognition.

pub mod active;
pub mod augment;
pub mod charset;
pub mod corpus;
pub mod error;
pub mod finetune;
pub mod image;
pub mod model;
pub mod nn;
pub mod seed;
pub mod stats;
pub mod stopping;

pub use error::{Error, Result};
