//! Stratified k-fold cross-validation and held-out metrics.

mod cv;
mod folds;
mod metrics;

use std::path::PathBuf;

use thiserror::Error;

use crate::nn::NnError;

pub use cv::{run_cv, run_cv_per_subject, CvOutcome, CvReport, CvSummary, FoldInput, SubjectResult};
pub use folds::{make_folds, FoldPlan};
pub use metrics::{
    auroc_binary, auroc_ovr, average_precision_binary, average_precision_micro, compute_metrics,
    confusion_matrix, micro_average_roc, FoldMetrics, MetricsReport,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("degenerate class: {0}")]
    DegenerateClass(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid scores: {0}")]
    InvalidScores(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{context}: {source}")]
    Training { context: String, source: NnError },
    #[error("subject {subject}: {source}")]
    Subject { subject: String, source: Box<EvalError> },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}
