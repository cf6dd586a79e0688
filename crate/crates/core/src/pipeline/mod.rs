//! End-to-end runs driven by one config file.
//!
//! [`run_pipeline`] executes ingest, preprocess, features (importance and
//! channel selection), GAF encoding, final training and cross-validation in
//! order. Every stage writes its artifacts under `<output_dir>/<stage>/`
//! together with a `manifest.json` listing them; the top-level
//! `manifest.json` lists the stage manifests.

mod artifacts;
mod config;
mod run;
mod stages;

use std::path::PathBuf;

use thiserror::Error;

use crate::eval::EvalError;
use crate::features::FeatureError;
use crate::gaf::GafError;
use crate::ingest::IngestError;
use crate::nn::NnError;
use crate::preprocess::PreprocessError;

pub use artifacts::{
    read_epoch_csv, read_epoch_dir, read_image_dir, write_epoch_dir, write_image_dir, write_json, EpochEntry,
    EpochManifest, ImageEntry, ImageManifest, ImageSample, StageManifest, LABELS_FILE, MANIFEST_FILE,
};
pub use config::{
    Baseline, EvalSection, FeatureSection, GafSection, LogregSettings, ModelSection, PipelineConfig,
    PreprocessSection, ResolvedConfig, AUTO_CHANNEL,
};
pub use run::{run_pipeline, PipelineOutcome};
pub use stages::{
    build_feature_table, classify, cnn_cv, encode_images, feature_cv, fit_cnn, rank_channels, stratified_split,
    ChannelRanking, Prediction,
};

/// Error from one stage, before it is tagged with the stage name.
#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Gaf(#[from] GafError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Data(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage} stage: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: StageError,
    },
}

/// Broad failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl ErrorClass {
    /// 2 for configuration, 3 for data, 4 for numerical failures.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }
}

fn nn_class(e: &NnError) -> ErrorClass {
    match e {
        NnError::NumericalInstability(_) => ErrorClass::Numeric,
        NnError::InvalidConfig(_) => ErrorClass::Config,
        _ => ErrorClass::Data,
    }
}

fn eval_class(e: &EvalError) -> ErrorClass {
    match e {
        EvalError::Training { source, .. } => nn_class(source),
        EvalError::Subject { source, .. } => eval_class(source),
        EvalError::InvalidConfig(_) => ErrorClass::Config,
        _ => ErrorClass::Data,
    }
}

impl StageError {
    pub fn class(&self) -> ErrorClass {
        match self {
            StageError::Preprocess(PreprocessError::SingularCoefficients { .. }) => ErrorClass::Numeric,
            StageError::Preprocess(PreprocessError::InvalidBand { .. }) => ErrorClass::Config,
            StageError::Ingest(IngestError::InvalidConfig(_)) => ErrorClass::Config,
            StageError::Nn(e) => nn_class(e),
            StageError::Eval(e) => eval_class(e),
            _ => ErrorClass::Data,
        }
    }

    pub fn at(self, stage: &'static str) -> PipelineError {
        PipelineError::Stage { stage, source: self }
    }
}

impl PipelineError {
    pub fn class(&self) -> ErrorClass {
        match self {
            PipelineError::Config(_) => ErrorClass::Config,
            PipelineError::Stage { source, .. } => source.class(),
        }
    }
}
