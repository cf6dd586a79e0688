//! Windowed-mean features and permutation importance.
//!
//! Every channel contributes four features: the mean HbO and HbR over the
//! half-open windows `[5, 10) s` and `[10, 15) s` after onset, named
//! `<ch>_hbo_w1`, `<ch>_hbo_w2`, `<ch>_hbr_w1`, `<ch>_hbr_w2`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::Classifier;
use crate::numfmt::fmt_f64;
use crate::preprocess::Epoch;
use crate::rng::{derive_seed, seeded};
use crate::task::Task;

pub const FEATURE_WINDOWS_S: [(f64, f64); 2] = [(5.0, 10.0), (10.0, 15.0)];

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("repeats must be at least 1")]
    NoRepeats,
    #[error("importance report is empty")]
    EmptyReport,
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub label: Task,
    pub feature_names: Vec<String>,
}

pub fn feature_names<S: AsRef<str>>(channel_ids: &[S]) -> Vec<String> {
    channel_ids
        .iter()
        .flat_map(|id| {
            let id = id.as_ref();
            ["hbo_w1", "hbo_w2", "hbr_w1", "hbr_w2"].map(|s| format!("{id}_{s}"))
        })
        .collect()
}

/// Channel part of a feature name (`ch17_hbo_w2` -> `ch17`).
pub fn channel_of(feature: &str) -> &str {
    feature.rsplitn(3, '_').nth(2).unwrap_or(feature)
}

pub fn extract_features(epoch: &Epoch) -> FeatureVector {
    let windows: Vec<_> = FEATURE_WINDOWS_S
        .iter()
        .map(|&(lo, hi)| epoch.window(lo, hi, false))
        .collect();
    // An empty window (absurdly low sample rates) contributes 0.
    let mean = |s: &[f64]| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        }
    };
    let values = epoch
        .channels
        .iter()
        .flat_map(|ch| {
            let (w1, w2) = (windows[0].clone(), windows[1].clone());
            [
                mean(&ch.hbo[w1.clone()]),
                mean(&ch.hbo[w2.clone()]),
                mean(&ch.hbr[w1]),
                mean(&ch.hbr[w2]),
            ]
        })
        .collect();
    let ids: Vec<&str> = epoch.channels.iter().map(|c| c.channel_id.as_str()).collect();
    FeatureVector {
        values,
        label: epoch.task,
        feature_names: feature_names(&ids),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// In input column order.
    pub features: Vec<FeatureImportance>,
    /// Feature names, descending by mean importance, ties by name.
    pub ranking: Vec<String>,
}

impl ImportanceReport {
    fn from_features(features: Vec<FeatureImportance>) -> Self {
        let mut order: Vec<&FeatureImportance> = features.iter().collect();
        order.sort_by(|a, b| b.mean.total_cmp(&a.mean).then_with(|| a.name.cmp(&b.name)));
        let ranking = order.iter().map(|f| f.name.clone()).collect();
        ImportanceReport { features, ranking }
    }

    pub fn get(&self, name: &str) -> Option<&FeatureImportance> {
        self.features.iter().find(|f| f.name == name)
    }
}

fn accuracy<M: Classifier<[f64]> + ?Sized>(model: &M, rows: &[Vec<f64>], y: &[usize]) -> f64 {
    let hits = rows
        .iter()
        .zip(y)
        .filter(|(r, &t)| model.predict(r) == t)
        .count();
    hits as f64 / y.len().max(1) as f64
}

/// Accuracy drop from shuffling each column, averaged over `repeats`
/// independent shuffles. Feature `f`, repeat `r` shuffles with seed
/// `derive_seed(derive_seed(seed, f), r)`.
pub fn permutation_importance<M>(
    model: &M,
    x: &[Vec<f64>],
    y: &[usize],
    names: &[String],
    repeats: usize,
    seed: u64,
) -> Result<ImportanceReport, FeatureError>
where
    M: Classifier<[f64]> + Sync + ?Sized,
{
    if repeats == 0 {
        return Err(FeatureError::NoRepeats);
    }
    if x.len() != y.len() {
        return Err(FeatureError::DimensionMismatch(format!(
            "{} rows but {} labels",
            x.len(),
            y.len()
        )));
    }
    if let Some((i, r)) = x.iter().enumerate().find(|(_, r)| r.len() != names.len()) {
        return Err(FeatureError::DimensionMismatch(format!(
            "row {i} has {} values, expected {}",
            r.len(),
            names.len()
        )));
    }
    let baseline = accuracy(model, x, y);
    let features = names
        .par_iter()
        .enumerate()
        .map(|(f, name)| {
            let drops: Vec<f64> = (0..repeats)
                .map(|r| {
                    let mut perm: Vec<usize> = (0..x.len()).collect();
                    perm.shuffle(&mut seeded(derive_seed(derive_seed(seed, f as u64), r as u64)));
                    let shuffled: Vec<Vec<f64>> = x
                        .iter()
                        .zip(&perm)
                        .map(|(row, &src)| {
                            let mut row = row.clone();
                            row[f] = x[src][f];
                            row
                        })
                        .collect();
                    baseline - accuracy(model, &shuffled, y)
                })
                .collect();
            let mean = drops.iter().sum::<f64>() / repeats as f64;
            let var = drops.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / repeats as f64;
            FeatureImportance {
                name: name.clone(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(ImportanceReport::from_features(features))
}

/// Channel of the top-ranked feature; ties at the top go to the
/// lexicographically smallest channel id.
pub fn select_channel(report: &ImportanceReport) -> Result<String, FeatureError> {
    let top = report
        .features
        .iter()
        .map(|f| f.mean)
        .max_by(f64::total_cmp)
        .ok_or(FeatureError::EmptyReport)?;
    Ok(report
        .features
        .iter()
        .filter(|f| f.mean == top)
        .map(|f| channel_of(&f.name))
        .min()
        .expect("at least one feature attains the maximum")
        .to_string())
}

/// Rows of `features.csv`: `subject_id, <features...>, label`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub subject_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<Task>,
}

impl FeatureTable {
    pub fn push(&mut self, subject_id: &str, fv: FeatureVector) -> Result<(), FeatureError> {
        if self.names.is_empty() && self.rows.is_empty() {
            self.names = fv.feature_names.clone();
        } else if self.names != fv.feature_names {
            return Err(FeatureError::DimensionMismatch(
                "feature names differ between epochs".into(),
            ));
        }
        self.subject_ids.push(subject_id.to_string());
        self.rows.push(fv.values);
        self.labels.push(fv.label);
        Ok(())
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|t| t.index()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FeatureError> {
        let mut text = String::from("subject_id");
        for n in &self.names {
            text.push(',');
            text.push_str(n);
        }
        text.push_str(",label\n");
        for ((s, row), label) in self.subject_ids.iter().zip(&self.rows).zip(&self.labels) {
            text.push_str(s);
            for v in row {
                text.push(',');
                text.push_str(&fmt_f64(*v));
            }
            text.push(',');
            text.push_str(label.code());
            text.push('\n');
        }
        fs::write(path, text).map_err(|source| FeatureError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self, FeatureError> {
        let text = fs::read_to_string(path).map_err(|source| FeatureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |message: String| FeatureError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        if header.len() < 2 || header[0] != "subject_id" || header[header.len() - 1] != "label" {
            return Err(bad("header must be `subject_id,<features...>,label`".into()));
        }
        let mut table = FeatureTable {
            names: header[1..header.len() - 1].iter().map(|s| s.to_string()).collect(),
            ..FeatureTable::default()
        };
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != header.len() {
                return Err(bad(format!("row {} has {} cells, expected {}", i + 1, cells.len(), header.len())));
            }
            let row = cells[1..cells.len() - 1]
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    c.parse::<f64>()
                        .map_err(|_| bad(format!("row {}, column `{}`: bad number {c:?}", i + 1, header[j + 1])))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let label = cells[cells.len() - 1]
                .parse::<Task>()
                .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
            table.subject_ids.push(cells[0].to_string());
            table.rows.push(row);
            table.labels.push(label);
        }
        Ok(table)
    }
}

pub fn write_importance_csv(report: &ImportanceReport, path: &Path) -> Result<(), FeatureError> {
    let mut text = String::from("rank,feature,mean_importance,std_importance\n");
    for (rank, name) in report.ranking.iter().enumerate() {
        let f = report.get(name).expect("ranking names come from the report");
        text.push_str(&format!("{},{},{},{}\n", rank + 1, name, fmt_f64(f.mean), fmt_f64(f.std)));
    }
    fs::write(path, text).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })
}
