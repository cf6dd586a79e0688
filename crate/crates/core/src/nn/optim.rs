use serde::{Deserialize, Serialize};

/// One elementwise RMSprop update:
/// `v <- rho v + (1 - rho) g^2`, `theta <- theta - lr g / (sqrt(v) + eps)`.
pub fn rmsprop_step(theta: &mut [f64], grad: &[f64], v: &mut [f64], lr: f64, rho: f64, eps: f64) {
    assert!(
        theta.len() == grad.len() && grad.len() == v.len(),
        "rmsprop_step: parameter, gradient and state lengths differ"
    );
    for ((t, g), s) in theta.iter_mut().zip(grad).zip(v.iter_mut()) {
        *s = rho * *s + (1.0 - rho) * g * g;
        *t -= lr * g / (s.sqrt() + eps);
    }
}

/// RMSprop state for a list of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub rho: f64,
    pub epsilon: f64,
    state: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(sizes: impl IntoIterator<Item = usize>, rho: f64, epsilon: f64) -> Self {
        RmsProp {
            rho,
            epsilon,
            state: sizes.into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }

    /// Updates parameter array `i` in place.
    pub fn step(&mut self, i: usize, theta: &mut [f64], grad: &[f64], lr: f64) {
        rmsprop_step(theta, grad, &mut self.state[i], lr, self.rho, self.epsilon);
    }
}

/// Halves (by `factor`) the learning rate when the monitored loss has not
/// improved by at least `min_delta` for `patience` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_lr: f64, min_delta: f64) -> Self {
        PlateauScheduler {
            factor,
            patience,
            min_lr,
            min_delta,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Feeds one epoch's loss; returns the new learning rate when it changes.
    pub fn observe(&mut self, loss: f64, lr: f64) -> Option<f64> {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.wait = 0;
            return None;
        }
        self.wait += 1;
        if self.wait >= self.patience && lr > self.min_lr {
            self.wait = 0;
            let next = (lr * self.factor).max(self.min_lr);
            return (next < lr).then_some(next);
        }
        None
    }
}

/// Stops once the monitored loss has not beaten the best by more than
/// `min_delta` for `patience` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: None,
            wait: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64, epoch: usize) -> (bool, bool) {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            return (true, false);
        }
        self.wait += 1;
        (false, self.wait >= self.patience)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}
