use serde::{Deserialize, Serialize};

use super::{Classifier, NnError};
use crate::N_CLASSES;

fn check_rows(x: &[Vec<f64>], y: &[usize]) -> Result<usize, NnError> {
    if x.is_empty() {
        return Err(NnError::EmptyDataset("no training rows".into()));
    }
    if x.len() != y.len() {
        return Err(NnError::DimensionMismatch(format!("{} rows but {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if let Some((i, r)) = x.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(NnError::DimensionMismatch(format!("row {i} has {} values, expected {d}", r.len())));
    }
    if let Some(l) = y.iter().find(|&&l| l >= N_CLASSES) {
        return Err(NnError::DimensionMismatch(format!("label {l} is not a class index")));
    }
    Ok(d)
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    /// Per-feature mean and scale used for standardization.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[class][feature]` weights on standardized features.
    pub weights: Vec<Vec<f64>>,
    pub bias: [f64; 3],
}

impl LogisticRegression {
    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    fn logits(&self, x: &[f64]) -> [f64; 3] {
        let mut z = self.bias;
        for (k, w) in self.weights.iter().enumerate() {
            for (j, xv) in x.iter().enumerate() {
                z[k] += w[j] * (xv - self.mean[j]) / self.scale[j];
            }
        }
        z
    }
}

fn softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

impl Classifier<[f64]> for LogisticRegression {
    fn predict_proba(&self, x: &[f64]) -> [f64; 3] {
        assert_eq!(x.len(), self.dims(), "feature vector length differs from the model");
        softmax3(self.logits(x))
    }
}

/// Full-batch gradient descent on mean softmax cross-entropy plus
/// `l2 * sum(w^2)` (weights only). Features are standardized to zero mean and
/// unit population variance first; constant features keep scale 1.
pub fn train_logreg(x: &[Vec<f64>], y: &[usize], l2: f64, lr: f64, epochs: usize) -> Result<LogisticRegression, NnError> {
    let d = check_rows(x, y)?;
    if !(l2 >= 0.0 && lr > 0.0 && l2.is_finite() && lr.is_finite()) {
        return Err(NnError::InvalidConfig(format!("need l2 >= 0 and lr > 0, got {l2} and {lr}")));
    }
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 { var.sqrt() } else { 1.0 }
        })
        .collect();
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / scale[j]).collect())
        .collect();
    let mut model = LogisticRegression {
        mean,
        scale,
        weights: vec![vec![0.0; d]; N_CLASSES],
        bias: [0.0; 3],
    };
    let mut gw = vec![vec![0.0; d]; N_CLASSES];
    for epoch in 0..epochs {
        gw.iter_mut().for_each(|g| g.fill(0.0));
        let mut gb = [0.0; 3];
        for (row, &label) in z.iter().zip(y) {
            let mut logits = model.bias;
            for (k, w) in model.weights.iter().enumerate() {
                logits[k] += w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
            let p = softmax3(logits);
            for k in 0..N_CLASSES {
                let r = p[k] - f64::from(u8::from(k == label));
                gb[k] += r / n;
                for (g, v) in gw[k].iter_mut().zip(row) {
                    *g += r * v / n;
                }
            }
        }
        for k in 0..N_CLASSES {
            model.bias[k] -= lr * gb[k];
            for (w, g) in model.weights[k].iter_mut().zip(&gw[k]) {
                *w -= lr * (g + 2.0 * l2 * *w);
            }
        }
        if model.bias.iter().chain(model.weights.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(NnError::NumericalInstability(format!("logistic regression diverged in epoch {epoch}")));
        }
    }
    Ok(model)
}

/// k-nearest-neighbour classifier over stored training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knn {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub k: usize,
}

impl Knn {
    pub fn fit(x: &[Vec<f64>], y: &[usize], k: usize) -> Result<Self, NnError> {
        check_rows(x, y)?;
        if k == 0 {
            return Err(NnError::InvalidConfig("k must be at least 1".into()));
        }
        Ok(Knn {
            x: x.to_vec(),
            y: y.to_vec(),
            k,
        })
    }

    /// Votes and summed distances per class among the k nearest rows.
    fn neighbours(&self, q: &[f64]) -> ([usize; 3], [f64; 3]) {
        assert_eq!(q.len(), self.x[0].len(), "query length differs from the training rows");
        let mut d: Vec<(f64, usize)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = [0usize; 3];
        let mut dist = [0.0; 3];
        for &(dv, i) in d.iter().take(self.k.min(d.len())) {
            votes[self.y[i]] += 1;
            dist[self.y[i]] += dv;
        }
        (votes, dist)
    }
}

impl Classifier<[f64]> for Knn {
    /// Vote fractions among the k nearest rows.
    fn predict_proba(&self, x: &[f64]) -> [f64; 3] {
        let (votes, _) = self.neighbours(x);
        let total: usize = votes.iter().sum();
        votes.map(|v| v as f64 / total as f64)
    }

    /// Majority vote; ties go to the smallest mean neighbour distance, then
    /// the lowest class index.
    fn predict(&self, x: &[f64]) -> usize {
        let (votes, dist) = self.neighbours(x);
        let top = *votes.iter().max().expect("three classes");
        let mut best: Option<(usize, f64)> = None;
        for c in (0..N_CLASSES).filter(|&c| votes[c] == top) {
            let mean = dist[c] / votes[c] as f64;
            if best.is_none_or(|(_, m)| mean < m) {
                best = Some((c, mean));
            }
        }
        best.expect("at least one neighbour").0
    }
}

/// Label of `x` by k-NN over `(x_train, y_train)`.
pub fn knn_predict(x_train: &[Vec<f64>], y_train: &[usize], x: &[f64], k: usize) -> Result<usize, NnError> {
    let model = Knn::fit(x_train, y_train, k)?;
    if x.len() != x_train[0].len() {
        return Err(NnError::DimensionMismatch(format!(
            "query has {} values, training rows {}",
            x.len(),
            x_train[0].len()
        )));
    }
    Ok(model.predict(x))
}
