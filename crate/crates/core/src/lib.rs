//! Core library for knowledge-distillation explainability experiments:
//! distillation objectives, task-oriented attention, mixture-of-experts
//! explainer students, virtual attention convolutions, neural-tree
//! extraction, and a small deterministic training harness.

pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod explainer;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod train;
pub mod tree;
pub mod types;
pub mod vam;

pub use attention::{AttentionRecord, AttentionSnapshot};
pub use error::{Error, Result};
pub use types::{BinaryTaskWeights, KDHyperParams, LogitVector, ProbVector};
