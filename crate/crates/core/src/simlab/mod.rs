//! Simulated ground truths, accuracy metrics and the replication harness.

pub mod config;
pub mod metrics;
pub mod study;
pub mod truth;

pub use config::{default_raman_profile, NoiseRecipe, RandomRecipe, SimConfig};
pub use metrics::{metric_d, metric_d_fixed, metric_d_mat, metric_d_tensor, metric_d_triple};
pub use study::{
    cell_rng, expected_direction, run_study, summarize, DMetrics, Method, MseStats, ReplicateRecord, StudyReport,
    StudyRow, StudySpec, Summary,
};
pub use truth::{gen_truth, SimTruth};
