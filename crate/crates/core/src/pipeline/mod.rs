//! Commands wiring the modules into the detection, classification and
//! compression workflows, plus the config, data and training plumbing they
//! share.

mod commands;
mod config;
mod data;
mod metrics;
mod train;

use std::path::Path;

use thiserror::Error;

pub use commands::*;
pub use config::{sub_seed, RunConfig};
pub use data::{
    clip_samples, featurize_clip, load_clip, load_split, read_dataset, DatasetEntry, FeatureSet,
};
pub use metrics::Metrics;
pub use train::{
    accuracy, argmax, fit, fit_with, logits_all, predictions, History, LossFn, TrainOptions,
};

use crate::audio_io::AudioError;
use crate::models::ModelError;
use crate::synthdata::SynthError;
use crate::tensor_nn::NnError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("model predicts {model} classes but the data uses {data} labels")]
    LabelSetMismatch { model: usize, data: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl PipelineError {
    /// 1 for config/validation problems, 2 for I/O, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::EmptyDataset
            | PipelineError::CheckpointMismatch(_)
            | PipelineError::LabelSetMismatch { .. } => 1,
            PipelineError::Io(_) => 2,
            PipelineError::Numeric(_) => 3,
            PipelineError::Model(e) => match e {
                ModelError::InvalidWidth(_)
                | ModelError::InvalidConfig(_)
                | ModelError::CheckpointMismatch(_) => 1,
                ModelError::Nn(NnError::NotNormalized { .. }) => 3,
                ModelError::Nn(_) => 1,
                _ => 2,
            },
            PipelineError::Nn(NnError::NotNormalized { .. }) => 3,
            PipelineError::Nn(_) => 1,
        }
    }

    pub(crate) fn from_audio(path: &Path, e: AudioError) -> Self {
        match e {
            AudioError::InvalidClip(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => PipelineError::Io(format!("{}: {other}", path.display())),
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        PipelineError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::BadSpec(m) => PipelineError::Config(m),
            other => PipelineError::Io(other.to_string()),
        }
    }
}
