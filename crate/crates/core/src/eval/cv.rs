use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, FoldMetrics, MetricsReport};
use super::{make_folds, EvalError, FoldPlan};
use crate::nn::{argmax, NnError};
use crate::rng::derive_seed;

/// What a model factory sees for one fold.
#[derive(Debug)]
pub struct FoldInput<'a, S> {
    pub fold: usize,
    /// Seed for everything random in this fold's training.
    pub seed: u64,
    pub train: Vec<&'a S>,
    pub train_labels: Vec<usize>,
    pub test: Vec<&'a S>,
}

/// Held-out probabilities for every sample plus the metrics over them.
#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub predictions: Vec<[f64; 3]>,
    pub report: MetricsReport,
}

/// Trains one fresh model per fold (folds run in parallel) and scores the
/// pooled held-out predictions. Fold `f` trains with seed
/// `derive_seed(seed, f)`; a test sample never appears in its fold's
/// training set.
pub fn run_cv<S, F>(samples: &[S], labels: &[usize], plan: &FoldPlan, seed: u64, fit: F) -> Result<CvOutcome, EvalError>
where
    S: Sync,
    F: Fn(&FoldInput<S>) -> Result<Vec<[f64; 3]>, NnError> + Sync,
{
    if samples.len() != labels.len() || plan.assignments.len() != labels.len() {
        return Err(EvalError::DimensionMismatch(format!(
            "{} samples, {} labels, {} fold assignments",
            samples.len(),
            labels.len(),
            plan.assignments.len()
        )));
    }
    let per_fold: Vec<(Vec<usize>, Vec<[f64; 3]>, FoldMetrics)> = (0..plan.k)
        .into_par_iter()
        .map(|fold| {
            let test_idx = plan.test_indices(fold);
            let train_idx = plan.train_indices(fold);
            let input = FoldInput {
                fold,
                seed: derive_seed(seed, fold as u64),
                train: train_idx.iter().map(|&i| &samples[i]).collect(),
                train_labels: train_idx.iter().map(|&i| labels[i]).collect(),
                test: test_idx.iter().map(|&i| &samples[i]).collect(),
            };
            let preds = fit(&input).map_err(|source| EvalError::Training {
                context: format!("fold {fold}"),
                source,
            })?;
            if preds.len() != test_idx.len() {
                return Err(EvalError::DimensionMismatch(format!(
                    "fold {fold}: {} predictions for {} test samples",
                    preds.len(),
                    test_idx.len()
                )));
            }
            let hits = test_idx.iter().zip(&preds).filter(|(&i, p)| argmax(&p[..]) == labels[i]).count();
            let metrics = FoldMetrics {
                fold,
                n_train: train_idx.len(),
                n_test: test_idx.len(),
                accuracy: hits as f64 / test_idx.len().max(1) as f64,
            };
            Ok((test_idx, preds, metrics))
        })
        .collect::<Result<_, EvalError>>()?;
    let mut predictions = vec![[0.0; 3]; samples.len()];
    let mut folds = Vec::with_capacity(plan.k);
    for (idx, preds, metrics) in per_fold {
        for (i, p) in idx.into_iter().zip(preds) {
            predictions[i] = p;
        }
        folds.push(metrics);
    }
    let mut report = compute_metrics(&predictions, labels)?;
    report.folds = folds;
    Ok(CvOutcome { predictions, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub subject_id: String,
    pub report: MetricsReport,
}

/// Per-recording cross-validation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub per_subject: Vec<SubjectResult>,
    /// Metrics over every held-out prediction of every subject.
    pub pooled: MetricsReport,
    /// Mean of the per-subject accuracies.
    pub macro_accuracy: f64,
}

/// Runs `k`-fold CV separately within each subject. Subjects are processed
/// in id order; the subject at position `s` uses seed `derive_seed(seed, s)`
/// for both its folds and its training.
pub fn run_cv_per_subject<S, F>(
    samples: &[S],
    labels: &[usize],
    subjects: &[String],
    k: usize,
    stratified: bool,
    seed: u64,
    fit: F,
) -> Result<CvSummary, EvalError>
where
    S: Sync,
    F: Fn(&FoldInput<S>) -> Result<Vec<[f64; 3]>, NnError> + Sync,
{
    if samples.len() != labels.len() || subjects.len() != labels.len() {
        return Err(EvalError::DimensionMismatch(format!(
            "{} samples, {} labels, {} subject ids",
            samples.len(),
            labels.len(),
            subjects.len()
        )));
    }
    if samples.is_empty() {
        return Err(EvalError::TooFewSamples("no samples".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in subjects.iter().enumerate() {
        groups.entry(s.as_str()).or_default().push(i);
    }
    let groups: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    let outcomes: Vec<(Vec<usize>, CvOutcome)> = groups
        .par_iter()
        .enumerate()
        .map(|(s, (subject, idx))| {
            let sub_seed = derive_seed(seed, s as u64);
            let sub_samples: Vec<&S> = idx.iter().map(|&i| &samples[i]).collect();
            let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let annotate = |e: EvalError| EvalError::Subject {
                subject: subject.to_string(),
                source: Box::new(e),
            };
            let plan = make_folds(&sub_labels, k, stratified, sub_seed).map_err(annotate)?;
            let out = run_cv(&sub_samples, &sub_labels, &plan, sub_seed, |fold: &FoldInput<&S>| {
                let inner = FoldInput {
                    fold: fold.fold,
                    seed: fold.seed,
                    train: fold.train.iter().map(|s| **s).collect(),
                    train_labels: fold.train_labels.clone(),
                    test: fold.test.iter().map(|s| **s).collect(),
                };
                fit(&inner)
            })
            .map_err(annotate)?;
            Ok((idx.clone(), out))
        })
        .collect::<Result<_, EvalError>>()?;
    let mut pooled_scores = Vec::with_capacity(samples.len());
    let mut pooled_labels = Vec::with_capacity(samples.len());
    let mut per_subject = Vec::with_capacity(groups.len());
    for ((subject, _), (idx, out)) in groups.iter().zip(outcomes) {
        pooled_scores.extend_from_slice(&out.predictions);
        pooled_labels.extend(idx.iter().map(|&i| labels[i]));
        per_subject.push(SubjectResult {
            subject_id: subject.to_string(),
            report: out.report,
        });
    }
    let pooled = compute_metrics(&pooled_scores, &pooled_labels)?;
    let macro_accuracy = per_subject.iter().map(|s| s.report.accuracy).sum::<f64>() / per_subject.len() as f64;
    Ok(CvSummary {
        per_subject,
        pooled,
        macro_accuracy,
    })
}

/// report.json: metrics plus an echo of the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub software: String,
    pub version: String,
    pub model: String,
    pub k: usize,
    pub stratified: bool,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(flatten)]
    pub summary: CvSummary,
}

impl CvReport {
    pub fn new(model: &str, k: usize, stratified: bool, seed: u64, config: serde_json::Value, summary: CvSummary) -> Self {
        CvReport {
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            model: model.into(),
            k,
            stratified,
            seed,
            config,
            summary,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json()).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| EvalError::InvalidConfig(format!("{}: {e}", path.display())))
    }
}
