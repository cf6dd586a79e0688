use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::nn::argmax;
use crate::N_CLASSES;

/// Held-out metrics for one set of predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub accuracy: f64,
    pub per_class_auroc: [f64; 3],
    pub micro_auroc: f64,
    pub average_precision_micro: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[u64; 3]; 3],
    #[serde(default)]
    pub folds: Vec<FoldMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
}

fn check(scores: &[[f64; 3]], labels: &[usize]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::DimensionMismatch(format!(
            "{} score rows but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= N_CLASSES) {
        return Err(EvalError::DimensionMismatch(format!("label {l} is not a class index")));
    }
    if let Some((i, row)) = scores
        .iter()
        .enumerate()
        .find(|(_, r)| !((r.iter().sum::<f64>() - 1.0).abs() <= 1e-6))
    {
        return Err(EvalError::InvalidScores(format!("row {i} sums to {}", row.iter().sum::<f64>())));
    }
    Ok(())
}

/// Mann-Whitney AUROC of a binary problem: the share of (positive, negative)
/// pairs ranked correctly, ties counting one half. Computed by sorting and
/// grouping equal scores, with exact integer pair counts.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != positive.len() {
        return Err(EvalError::DimensionMismatch(format!(
            "{} scores but {} flags",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::InvalidScores("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as u128;
    let n_neg = positive.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateClass(format!("{n_pos} positives and {n_neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U: 2 * concordant + tied
    let (mut twice_u, mut neg_below) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// One-vs-rest AUROC of class `positive_class`.
pub fn auroc_ovr(scores: &[[f64; 3]], labels: &[usize], positive_class: usize) -> Result<f64, EvalError> {
    check(scores, labels)?;
    let s: Vec<f64> = scores.iter().map(|r| r[positive_class]).collect();
    let p: Vec<bool> = labels.iter().map(|&l| l == positive_class).collect();
    auroc_binary(&s, &p).map_err(|e| match e {
        EvalError::DegenerateClass(m) => EvalError::DegenerateClass(format!("class {positive_class}: {m}")),
        e => e,
    })
}

/// All `3n` one-vs-rest decisions pooled into one binary problem.
fn pooled(scores: &[[f64; 3]], labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    let mut s = Vec::with_capacity(3 * scores.len());
    let mut p = Vec::with_capacity(3 * scores.len());
    for (row, &l) in scores.iter().zip(labels) {
        for (c, &v) in row.iter().enumerate() {
            s.push(v);
            p.push(c == l);
        }
    }
    (s, p)
}

pub fn micro_average_roc(scores: &[[f64; 3]], labels: &[usize]) -> Result<f64, EvalError> {
    check(scores, labels)?;
    let (s, p) = pooled(scores, labels);
    auroc_binary(&s, &p)
}

/// Step-wise average precision `sum (R_k - R_{k-1}) P_k` over descending
/// distinct score thresholds.
pub fn average_precision_binary(scores: &[f64], positive: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != positive.len() {
        return Err(EvalError::DimensionMismatch(format!(
            "{} scores but {} flags",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(EvalError::DegenerateClass("no positives".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

pub fn average_precision_micro(scores: &[[f64; 3]], labels: &[usize]) -> Result<f64, EvalError> {
    check(scores, labels)?;
    let (s, p) = pooled(scores, labels);
    average_precision_binary(&s, &p)
}

/// `confusion[true][predicted]` with argmax predictions.
pub fn confusion_matrix(scores: &[[f64; 3]], labels: &[usize]) -> [[u64; 3]; 3] {
    let mut m = [[0u64; 3]; 3];
    for (row, &l) in scores.iter().zip(labels) {
        m[l][argmax(row)] += 1;
    }
    m
}

/// Accuracy, per-class and micro AUROC, micro average precision and the
/// confusion matrix of a set of predictions.
pub fn compute_metrics(scores: &[[f64; 3]], labels: &[usize]) -> Result<MetricsReport, EvalError> {
    check(scores, labels)?;
    if labels.is_empty() {
        return Err(EvalError::TooFewSamples("no predictions to score".into()));
    }
    let confusion = confusion_matrix(scores, labels);
    let correct: u64 = (0..N_CLASSES).map(|c| confusion[c][c]).sum();
    let mut per_class_auroc = [0.0; 3];
    for (c, v) in per_class_auroc.iter_mut().enumerate() {
        *v = auroc_ovr(scores, labels, c)?;
    }
    Ok(MetricsReport {
        n_samples: labels.len(),
        accuracy: correct as f64 / labels.len() as f64,
        per_class_auroc,
        micro_auroc: micro_average_roc(scores, labels)?,
        average_precision_micro: average_precision_micro(scores, labels)?,
        confusion,
        folds: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// O(n^2) pair counting.
    fn pair_oracle(scores: &[f64], positive: &[bool]) -> f64 {
        let (mut good, mut ties, mut pairs) = (0u64, 0u64, 0u64);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if positive[i] && !positive[j] {
                    pairs += 1;
                    if si > sj {
                        good += 1;
                    } else if si == sj {
                        ties += 1;
                    }
                }
            }
        }
        (good as f64 + 0.5 * ties as f64) / pairs as f64
    }

    fn random_rows(n: usize, levels: u32, seed: u64) -> (Vec<[f64; 3]>, Vec<usize>) {
        let mut rng = seeded(seed);
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let raw: [f64; 3] = std::array::from_fn(|_| f64::from(rng.random_range(1..=levels)));
            let s: f64 = raw.iter().sum();
            scores.push(raw.map(|v| v / s));
            labels.push(if i < 3 { i } else { rng.random_range(0..3) });
        }
        (scores, labels)
    }

    #[test]
    fn perfect_and_tied() {
        let scores = vec![[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.7, 0.2, 0.1]];
        let labels = vec![0, 1, 2, 0];
        for c in 0..3 {
            assert_eq!(auroc_ovr(&scores, &labels, c).unwrap(), 1.0);
        }
        assert_eq!(micro_average_roc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(average_precision_micro(&scores, &labels).unwrap(), 1.0);
        let flat = vec![[1.0 / 3.0; 3]; 4];
        assert_eq!(auroc_ovr(&flat, &labels, 0).unwrap(), 0.5);
        assert_eq!(micro_average_roc(&flat, &labels).unwrap(), 0.5);
    }

    #[test]
    fn matches_pair_counting_on_random_instances() {
        for seed in 0..50 {
            let (scores, labels) = random_rows(50, if seed % 2 == 0 { 3 } else { 1000 }, seed);
            for c in 0..3 {
                let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                let p: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                assert_eq!(auroc_ovr(&scores, &labels, c).unwrap(), pair_oracle(&s, &p));
            }
            let (s, p) = pooled(&scores, &labels);
            assert_eq!(micro_average_roc(&scores, &labels).unwrap(), pair_oracle(&s, &p));
        }
    }

    #[test]
    fn degenerate_class() {
        let scores = vec![[0.5, 0.3, 0.2]; 3];
        assert!(matches!(auroc_ovr(&scores, &[0, 0, 1], 2), Err(EvalError::DegenerateClass(_))));
        assert!(matches!(auroc_binary(&[0.1, 0.2], &[true, true]), Err(EvalError::DegenerateClass(_))));
    }

    #[test]
    fn rows_must_sum_to_one() {
        assert!(matches!(
            auroc_ovr(&[[0.5, 0.5, 0.5], [0.2, 0.3, 0.5]], &[0, 1], 0),
            Err(EvalError::InvalidScores(_))
        ));
    }

    #[test]
    fn average_precision_steps() {
        // descending: + - + -  -> P at recall steps: 1, 2/3
        let ap = average_precision_binary(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        // one tied block holding everything: precision = base rate
        let ap = average_precision_binary(&[0.5; 4], &[true, false, false, false]).unwrap();
        assert!((ap - 0.25).abs() < 1e-15);
    }

    #[test]
    fn confusion_and_accuracy_identity() {
        let (scores, labels) = random_rows(60, 7, 3);
        let m = compute_metrics(&scores, &labels).unwrap();
        for c in 0..3 {
            let row: u64 = m.confusion[c].iter().sum();
            assert_eq!(row as usize, labels.iter().filter(|&&l| l == c).count());
        }
        let trace: u64 = (0..3).map(|c| m.confusion[c][c]).sum();
        assert_eq!(m.accuracy, trace as f64 / 60.0);
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(
            raw in proptest::collection::vec((0u32..20, any::<bool>()), 2..60),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 20.0).collect();
            let flags: Vec<bool> = raw.iter().map(|(_, p)| *p).collect();
            prop_assume!(flags.iter().any(|&p| p) && flags.iter().any(|&p| !p));
            let a = auroc_binary(&scores, &flags).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(a, auroc_binary(&warped, &flags).unwrap());
            prop_assert_eq!(a, pair_oracle(&scores, &flags));
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
