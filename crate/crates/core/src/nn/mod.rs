//! Double-precision CNN engine, RMSprop training and two baselines.
//!
//! * [`Tensor`] is a shaped, row-major array.
//! * [`Network`] is built from a [`NetworkSpec`] and trained with [`train`].
//! * [`LogisticRegression`] and [`Knn`] classify flat feature vectors.
//! * Trained networks are saved as a `GNN1` weight file plus a JSON manifest.

mod baseline;
#[cfg(test)]
mod gradcheck;
mod io;
pub mod layers;
mod network;
mod optim;
mod tensor;
mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use baseline::{knn_predict, train_logreg, Knn, LogisticRegression};
pub use io::{
    load_model, manifest_path, read_weights, save_model, write_weights, ArrayInfo, ModelManifest,
    WEIGHTS_MAGIC,
};
pub use layers::{Layer, Param};
pub use network::{Activation, LayerSpec, Network, NetworkSpec, Padding, PaddingMode};
pub use optim::{rmsprop_step, EarlyStopping, PlateauScheduler, RmsProp};
pub use tensor::Tensor;
pub use train::{
    train, Dataset, EarlyStopConfig, EpochRecord, History, LrEvent, PlateauConfig, TrainConfig,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical instability: {0}")]
    NumericalInstability(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// A trained model mapping one input to probabilities over MI, MA, IS.
pub trait Classifier<X: ?Sized> {
    fn predict_proba(&self, x: &X) -> [f64; 3];

    /// Most probable class; the lowest index wins ties.
    fn predict(&self, x: &X) -> usize {
        argmax(&self.predict_proba(x))
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0, 1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 0.1, 0.9]), 2);
    }
}
