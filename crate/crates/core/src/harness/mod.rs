//! Synthetic markets, metrics and experiment runs.

pub mod experiments;
pub mod generate;
pub mod metrics;

pub use experiments::{
    envelope_experiment, fairness_experiment, propagation_experiment, stress_experiment, sustained_limit,
    write_rows, write_rows_to_path, ExperimentConfig,
};
pub use generate::{generate, scale_reserves, GeneratorConfig, ShapleySource};
pub use metrics::{spearman, MetricsRecord};
