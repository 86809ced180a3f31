//! Dataset generation/ingestion, experiment orchestration, and reporting.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;

pub use config::KeyValueConfig;
pub use dataset::{
    generate_scene, generate_toy_dataset, load_dataset, load_split, render_mask, save_png,
    Dataset, ToyDatasetSpec, CLASS_CAR, CLASS_NAMES, CLASS_PEDESTRIAN, N_CLASSES, PALETTE,
};
pub use experiment::{pipeline_name, run_experiment, AttackKind, ExperimentConfig, LambdaPolicy};
pub use report::{emit_report, results_csv, summary_csv, Aggregate, ResultTable, Row};

use thiserror::Error;

use crate::attacks::AttackError;
use crate::defenses::DefenseError;
use crate::metrics::MetricError;
use crate::segnet::ModelError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("image {image_id}, stage {stage}: {message}")]
    Stage { image_id: String, stage: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Png(#[from] image::ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}
