//! Training harness: run configuration, datasets-to-metrics training loops
//! for teachers and all objective variants, logit caching, evaluation, and
//! run comparison.

pub mod cache;
pub mod compare;
pub mod config;
pub mod distill;
pub mod evaluate;
pub mod metrics;
pub mod model;

pub use cache::{cache_teacher_logits, LogitCache};
pub use compare::{compare_objectives, load_run, CompareReport, CompareRow, RunRecord};
pub use config::{Mode, RunConfig, Variant};
pub use distill::{distill, teacher_into_dir, train_teacher, RunArtifacts};
pub use evaluate::{evaluate, EvalReport};
pub use metrics::{MetricsLog, MetricsRow};
pub use model::{load_model, save_model, StudentForward, StudentModel};
