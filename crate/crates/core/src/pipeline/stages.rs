use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::{read_epoch_csv, read_epoch_dir, read_json, EpochManifest, ImageSample, MANIFEST_FILE};
use super::config::{Baseline, LogregSettings};
use super::StageError;
use crate::eval::{run_cv_per_subject, CvSummary, EvalError, FoldInput};
use crate::features::{
    extract_features, permutation_importance, select_channel, FeatureError, FeatureTable, ImportanceReport,
};
use crate::gaf::{encode_epoch, GafError, GafSettings};
use crate::nn::{argmax, load_model, train, train_logreg, Classifier, Dataset, History, Knn, Network, NetworkSpec, NnError, TrainConfig};
use crate::preprocess::Epoch;
use crate::rng::{derive_seed, seeded};
use crate::task::Task;
use crate::N_CLASSES;

/// One feature row per epoch, tagged with its subject.
pub fn build_feature_table(epochs: &[Epoch]) -> Result<FeatureTable, FeatureError> {
    let mut table = FeatureTable::default();
    for e in epochs {
        table.push(&e.subject_id, extract_features(e))?;
    }
    Ok(table)
}

/// Permutation importance of a logistic regression fitted on every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRanking {
    pub report: ImportanceReport,
    pub channel: String,
    pub train_accuracy: f64,
}

pub fn rank_channels(
    table: &FeatureTable,
    logreg: &LogregSettings,
    repeats: usize,
    seed: u64,
) -> Result<ChannelRanking, StageError> {
    let y = table.label_indices();
    let model = train_logreg(&table.rows, &y, logreg.l2, logreg.learning_rate, logreg.epochs)?;
    let hits = table.rows.iter().zip(&y).filter(|(r, &t)| model.predict(r) == t).count();
    let report = permutation_importance(&model, &table.rows, &y, &table.names, repeats, seed)?;
    let channel = select_channel(&report)?;
    Ok(ChannelRanking {
        report,
        channel,
        train_accuracy: hits as f64 / y.len().max(1) as f64,
    })
}

/// Encodes `channel` of every epoch, in input order.
pub fn encode_images(epochs: &[Epoch], channel: &str, settings: &GafSettings) -> Result<Vec<ImageSample>, GafError> {
    epochs
        .par_iter()
        .map(|e| {
            Ok(ImageSample {
                subject_id: e.subject_id.clone(),
                trial_index: e.trial_index,
                task: e.task,
                image: encode_epoch(e, channel, settings)?,
            })
        })
        .collect()
}

/// Holds out `round(fraction * n_c)` shuffled members of each class `c`,
/// always leaving at least one for training. Returns ascending
/// `(train, validation)` indices.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeded(seed);
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for c in 0..N_CLASSES {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let n_val = ((fraction * members.len() as f64).round() as usize).min(members.len().saturating_sub(1));
        va.extend_from_slice(&members[..n_val]);
        tr.extend_from_slice(&members[n_val..]);
    }
    tr.sort_unstable();
    va.sort_unstable();
    (tr, va)
}

/// Trains a network on `inputs`, holding out `cfg.validation_fraction` of
/// each class for the schedules. The split uses `derive_seed(seed, 0)` and
/// training `derive_seed(seed, 1)`.
pub fn fit_cnn(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    inputs: &[&[f64]],
    labels: &[usize],
    seed: u64,
) -> Result<(Network, History), NnError> {
    if inputs.len() != labels.len() {
        return Err(NnError::DimensionMismatch(format!("{} inputs but {} labels", inputs.len(), labels.len())));
    }
    let (tr, va) = stratified_split(labels, cfg.validation_fraction, derive_seed(seed, 0));
    let pick = |idx: &[usize]| -> (Vec<&[f64]>, Vec<usize>) {
        (idx.iter().map(|&i| inputs[i]).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (xt, yt) = pick(&tr);
    let (xv, yv) = pick(&va);
    let cfg = TrainConfig {
        seed: derive_seed(seed, 1),
        ..cfg.clone()
    };
    train(spec, &Dataset::new(&xt, &yt)?, &Dataset::new(&xv, &yv)?, &cfg)
}

/// Per-subject k-fold CV of the CNN on GAF images.
pub fn cnn_cv(
    samples: &[ImageSample],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    k: usize,
    stratified: bool,
    seed: u64,
) -> Result<CvSummary, EvalError> {
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.image.matrix.as_slice()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.task.index()).collect();
    let subjects: Vec<String> = samples.iter().map(|s| s.subject_id.clone()).collect();
    run_cv_per_subject(&inputs, &labels, &subjects, k, stratified, seed, |fold: &FoldInput<&[f64]>| {
        let train_x: Vec<&[f64]> = fold.train.iter().map(|x| **x).collect();
        let (net, _) = fit_cnn(spec, cfg, &train_x, &fold.train_labels, fold.seed)?;
        let test_x: Vec<&[f64]> = fold.test.iter().map(|x| **x).collect();
        net.predict_proba_batch(&test_x)
    })
}

/// Per-subject k-fold CV of a feature baseline.
pub fn feature_cv(
    table: &FeatureTable,
    model: Baseline,
    logreg: &LogregSettings,
    knn_k: usize,
    k: usize,
    stratified: bool,
    seed: u64,
) -> Result<CvSummary, EvalError> {
    let labels = table.label_indices();
    run_cv_per_subject(&table.rows, &labels, &table.subject_ids, k, stratified, seed, |fold: &FoldInput<Vec<f64>>| {
        let x: Vec<Vec<f64>> = fold.train.iter().map(|r| (*r).clone()).collect();
        let y = &fold.train_labels;
        Ok(match model {
            Baseline::Logreg => {
                let m = train_logreg(&x, y, logreg.l2, logreg.learning_rate, logreg.epochs)?;
                fold.test.iter().map(|r| m.predict_proba(r)).collect()
            }
            Baseline::Knn => {
                let m = Knn::fit(&x, y, knn_k)?;
                fold.test.iter().map(|r| m.predict_proba(r)).collect()
            }
        })
    })
}

/// Model output for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub trial_index: usize,
    /// Task recorded with the epoch, when known.
    pub expected: Option<Task>,
    pub predicted: Task,
    /// MI, MA, IS.
    pub probabilities: [f64; 3],
}

#[derive(Deserialize)]
struct ModelExtras {
    channel: String,
    gaf: GafSettings,
}

/// Epochs from a directory with `manifest.json`, or one epoch CSV whose task
/// is taken from a sibling manifest when it lists the file.
fn load_epochs(path: &Path) -> Result<Vec<(Epoch, Option<Task>)>, StageError> {
    if path.is_dir() {
        return Ok(read_epoch_dir(path)?.into_iter().map(|e| {
            let t = e.task;
            (e, Some(t))
        }).collect());
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned());
    let sibling = path.with_file_name(MANIFEST_FILE);
    if sibling.exists() {
        if let Ok(m) = read_json::<EpochManifest>(&sibling) {
            if let Some(entry) = m.epochs.iter().find(|e| e.file.is_some() && e.file == name) {
                let e = read_epoch_csv(path, Some(entry))?;
                let t = e.task;
                return Ok(vec![(e, Some(t))]);
            }
        }
    }
    Ok(vec![(read_epoch_csv(path, None)?, None)])
}

/// Classifies every epoch in `epochs` (a file or an epoch directory) with a
/// model saved by the pipeline; the channel and GAF settings come from the
/// model manifest.
pub fn classify(model_path: &Path, epochs: &Path) -> Result<Vec<Prediction>, StageError> {
    let (net, manifest) = load_model(model_path)?;
    let extras: ModelExtras = serde_json::from_value(manifest.extras.clone()).map_err(|e| StageError::Parse {
        path: model_path.to_path_buf(),
        message: format!("model manifest lacks channel and gaf settings: {e}"),
    })?;
    let loaded = load_epochs(epochs)?;
    let images = loaded
        .iter()
        .map(|(e, _)| encode_epoch(e, &extras.channel, &extras.gaf))
        .collect::<Result<Vec<_>, _>>()?;
    let inputs: Vec<&[f64]> = images.iter().map(|i| i.matrix.as_slice()).collect();
    let probs = net.predict_proba_batch(&inputs)?;
    Ok(loaded
        .iter()
        .zip(probs)
        .map(|((e, expected), p)| Prediction {
            subject_id: e.subject_id.clone(),
            trial_index: e.trial_index,
            expected: *expected,
            predicted: Task::from_index(argmax(&p)).expect("three classes"),
            probabilities: p,
        })
        .collect())
}
