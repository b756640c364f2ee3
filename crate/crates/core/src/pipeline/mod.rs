//! Training, evaluation, ablation and robustness experiments, efficiency
//! reporting and feature export on top of the two-stream model.

mod config;
mod data;
mod experiments;
mod model;
mod train;

pub use config::{AblationMode, AugmentConfig, DataSource, SynthDataSpec, TrainConfig};
pub use data::{load_data, load_dataset, model_input, synthetic_benchmark, Dataset, Sample};
pub use experiments::{
    ablate, ablate_modes, ablation_csv, export_features, features_csv, flop_estimate,
    grad_check_config, grad_check_full_model, inference_ms, median, robustness, robustness_csv,
    AblationRow,
};
pub use model::{Model, ModelLoss, ModelOutput};
pub use train::{
    evaluate, percent, train, train_on, EpochStats, Evaluation, MetricsReport, Trained,
};
