use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::rng::seeded;
use crate::N_CLASSES;

/// Assignment of every sample to one of `k` test folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub stratified: bool,
    pub seed: u64,
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    /// Sample indices held out in fold `f`, ascending.
    pub fn test_indices(&self, f: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == f).collect()
    }

    /// Sample indices used for training in fold `f`, ascending.
    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != f).collect()
    }
}

/// Splits samples into `k` folds.
///
/// Stratified plans shuffle each class with the seeded generator and deal
/// its members round-robin, continuing the rotation across classes, so each
/// fold gets `floor` or `ceil` of every class's share. Plain plans shuffle all
/// indices and deal them round-robin.
pub fn make_folds(labels: &[usize], k: usize, stratified: bool, seed: u64) -> Result<FoldPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidConfig(format!("k must be at least 2, got {k}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= N_CLASSES) {
        return Err(EvalError::DimensionMismatch(format!("label {l} is not a class index")));
    }
    let mut rng = seeded(seed);
    let mut assignments = vec![0; labels.len()];
    if stratified {
        let groups: Vec<Vec<usize>> = (0..N_CLASSES)
            .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
            .filter(|g: &Vec<usize>| !g.is_empty())
            .collect();
        let smallest = groups.iter().map(Vec::len).min().unwrap_or(0);
        if k > smallest {
            return Err(EvalError::TooFewSamples(format!(
                "{k} stratified folds need at least {k} samples per class, the smallest class has {smallest}"
            )));
        }
        let mut offset = 0;
        for mut group in groups {
            group.shuffle(&mut rng);
            for (j, &i) in group.iter().enumerate() {
                assignments[i] = (offset + j) % k;
            }
            offset += group.len();
        }
    } else {
        if k > labels.len() {
            return Err(EvalError::TooFewSamples(format!("{k} folds need at least {k} samples, got {}", labels.len())));
        }
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        for (j, &i) in order.iter().enumerate() {
            assignments[i] = j % k;
        }
    }
    Ok(FoldPlan {
        k,
        stratified,
        seed,
        assignments,
    })
}
