//! Per-annotator rating models for subjective annotation tasks.
//!
//! The crate covers the whole pipeline: corpus ingestion and statistics, a
//! demographic-aware mixture-of-experts regressor with Bayesian annotator and
//! demographic embeddings, its composite training objective, evaluation with
//! per-group bootstrap intervals, expert-specialization analysis, persona-prompted
//! synthetic annotation, and strategies for blending synthetic data into training.
// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod corpus;
pub mod model;
pub mod kmeans;
pub mod ridge;
pub mod seed;
pub mod training;
pub mod evaluation;
pub mod specialization;
pub mod synthesis;
pub mod blending;
