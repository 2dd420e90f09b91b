//! Experiment harness: synthetic corpora, the end-to-end pipeline over a
//! run directory, analysis experiments and report emission.

use thiserror::Error;

use qrw_core::corpus::CorpusError;
use qrw_core::metrics::MetricError;
use qrw_core::model::ModelError;
use qrw_core::training::TrainError;

pub mod experiments;
pub mod pipeline;
pub mod report;
pub mod synth;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("class {0} has no records")]
    EmptyClass(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
