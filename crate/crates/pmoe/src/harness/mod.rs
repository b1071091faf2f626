//! Training loop, datasets, metrics, file formats, and the CLI.

pub mod cli;
pub mod config;
pub mod data;
pub mod idx;
pub mod optim;
pub mod train;

pub use config::{parse_experiment_config, ExperimentConfig};
pub use data::{
    generate_synthetic, ridge_probe_accuracy, Certificate, ComplementaryParams, Dataset,
    GeneratorKind, SyntheticDataset, SyntheticTaskSpec,
};
pub use idx::{load_idx_images, save_idx};
pub use optim::{adamw_step, AdamState, TrainConfig};
pub use train::{evaluate, train, EpochMetrics, MetricsReport};
