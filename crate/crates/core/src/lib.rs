//! fNIRS task classification with Gramian Angular Summation Field images.
//!
//! The crate covers the whole chain from raw optical densities to a trained
//! classifier:
//!
//! * [`ingest`] loads recordings from CSV and synthesizes labelled ones.
//! * [`preprocess`] converts optical density to HbO/HbR, band-pass filters
//!   with a zero-phase Butterworth cascade, cuts epochs and baseline-corrects.
//! * [`gaf`] turns one channel of an epoch into a GASF/GADF image.
//! * [`features`] builds windowed-mean feature vectors and ranks channels by
//!   permutation importance.
//! * [`nn`] is a small double-precision CNN engine plus logistic regression
//!   and k-NN baselines.
//! * [`eval`] runs stratified k-fold cross-validation and computes AUROC,
//!   average precision and confusion matrices.
//! * [`pipeline`] wires every stage together from one config file.

pub mod eval;
pub mod features;
pub mod gaf;
pub mod ingest;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub(crate) mod numfmt;
mod task;

pub use eval::{FoldPlan, MetricsReport};
pub use features::{FeatureVector, ImportanceReport};
pub use gaf::{GafImage, GafKind, RescaledSeries};
pub use ingest::{ChannelSeries, Recording, SynthesisConfig, TrialMarker};
pub use nn::{NetworkSpec, Tensor, TrainConfig};
pub use pipeline::PipelineConfig;
pub use preprocess::{BeerLambertCoefficients, Epoch, FilterSpec, HbSeries};
pub use task::{ParseTaskError, Task};

/// Number of task classes (MI, MA, IS).
pub const N_CLASSES: usize = 3;
