//! Proxy-model cascades for boolean semantic predicates.
//!
//! A small query-specific encoder is trained on pre-computed document
//! embeddings, its score distribution is calibrated from a stratified
//! oracle-labeled sample, and thresholds are chosen so that only ambiguous
//! documents reach the expensive oracle while an accuracy target still holds.

pub mod api;
pub mod calibrate;
pub mod cascade;
pub mod error;
pub mod oracle;
pub mod pipeline;
pub mod proxy;
pub mod rng;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use store::{EmbeddingStore, EmbeddingVector, LabelSet, Workload};
