//! Hierarchy-aware contrastive classification.
//!
//! The crate trains an encoder and per-level prototype banks against a label
//! taxonomy: features are aggregated upward through the hierarchy, each
//! level contributes a prototype contrastive loss, and the per-level losses
//! are blended with adaptive weights. Inference assigns a class at every
//! level and the metrics quantify both accuracy and parent-child
//! consistency of the predictions.

pub mod aggregate;
pub mod autodiff;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod prototypes;
pub mod seeding;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
