use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::cross_entropy;
use super::optim::{EarlyStopping, PlateauScheduler, RmsProp};
use super::{argmax, Network, NetworkSpec, NnError, Tensor};
use crate::rng::{derive_seed, seeded};
use crate::N_CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 5,
            min_lr: 1e-6,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            patience: 10,
            min_delta: 0.0,
        }
    }
}

/// Mini-batch RMSprop settings. `validation_fraction` is the share of a
/// training fold held out for the schedules by callers that split data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub plateau: PlateauConfig,
    pub early_stop: EarlyStopConfig,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-8,
            plateau: PlateauConfig::default(),
            early_stop: EarlyStopConfig::default(),
            max_epochs: 100,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, NnError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| NnError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("rho", self.rho),
            ("epsilon", self.epsilon),
            ("plateau.factor", self.plateau.factor),
            ("plateau.min_lr", self.plateau.min_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(NnError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let checks = [
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.max_epochs >= 1, "max_epochs must be at least 1"),
            (self.rho < 1.0, "rho must be below 1"),
            (self.plateau.factor < 1.0, "plateau.factor must be below 1"),
            (self.plateau.patience >= 1, "plateau.patience must be at least 1"),
            (self.early_stop.patience >= 1, "early_stop.patience must be at least 1"),
            (self.plateau.min_delta >= 0.0, "plateau.min_delta must be >= 0"),
            (self.early_stop.min_delta >= 0.0, "early_stop.min_delta must be >= 0"),
            (
                (0.0..1.0).contains(&self.validation_fraction),
                "validation_fraction must be in [0, 1)",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(NnError::InvalidConfig((*msg).into())),
            None => Ok(()),
        }
    }
}

/// Borrowed labelled inputs of a common item shape.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub inputs: &'a [&'a [f64]],
    pub labels: &'a [usize],
}

impl<'a> Dataset<'a> {
    pub fn new(inputs: &'a [&'a [f64]], labels: &'a [usize]) -> Result<Self, NnError> {
        if inputs.len() != labels.len() {
            return Err(NnError::DimensionMismatch(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= N_CLASSES) {
            return Err(NnError::DimensionMismatch(format!("label {y} is not a class index")));
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrEvent {
    /// Epoch after which the new rate applies.
    pub epoch: usize,
    pub from: f64,
    pub to: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub lr_events: Vec<LrEvent>,
    /// Epoch at which early stopping fired, if it did.
    pub stopped_epoch: Option<usize>,
    /// Epoch whose weights were restored.
    pub best_epoch: usize,
}

fn batch_tensor(spec: &NetworkSpec, data: &Dataset, idx: &[usize]) -> Result<(Tensor, Vec<usize>), NnError> {
    let items: Vec<&[f64]> = idx.iter().map(|&i| data.inputs[i]).collect();
    let labels = idx.iter().map(|&i| data.labels[i]).collect();
    Ok((Tensor::stack(&spec.input_shape, &items)?, labels))
}

fn accuracy(probs: &Tensor, labels: &[usize]) -> usize {
    probs
        .data()
        .chunks(N_CLASSES)
        .zip(labels)
        .filter(|(p, &y)| argmax(p) == y)
        .count()
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode loss (cross-entropy plus penalty) and accuracy.
fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64), NnError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut ce, mut hits) = (0.0, 0);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = batch_tensor(net.spec(), data, chunk)?;
        let p = net.infer(&x)?;
        ce += cross_entropy(&p, &y)? * chunk.len() as f64;
        hits += accuracy(&p, &y);
    }
    let n = data.len() as f64;
    Ok((ce / n + net.l2_penalty(), hits as f64 / n))
}

fn unstable(what: &str, epoch: usize) -> NnError {
    NnError::NumericalInstability(format!("non-finite {what} in epoch {epoch}"))
}

/// Trains a fresh network with mini-batch RMSprop.
///
/// Kernel init, batch shuffling and dropout masks draw from seeds derived
/// from `cfg.seed` (streams 0, 1 and 2). Plateau and early-stopping
/// schedules monitor the validation loss, or the training loss when `val`
/// is empty; the weights of the best monitored epoch are restored.
pub fn train(
    spec: &NetworkSpec,
    train_set: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network, History), NnError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NnError::EmptyDataset("training set has no samples".into()));
    }
    let mut net = Network::new(spec, derive_seed(cfg.seed, 0))?;
    let mut shuffle_rng = seeded(derive_seed(cfg.seed, 1));
    let mut dropout_rng = seeded(derive_seed(cfg.seed, 2));
    let mut opt = RmsProp::new(net.params().iter().map(|p| p.value.len()), cfg.rho, cfg.epsilon);
    let p = &cfg.plateau;
    let mut plateau = PlateauScheduler::new(p.factor, p.patience, p.min_lr, p.min_delta);
    let mut stopper = EarlyStopping::new(cfg.early_stop.patience, cfg.early_stop.min_delta);
    let mut lr = cfg.learning_rate;
    let mut history = History::default();
    let mut best_state = net.state();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = batch_tensor(spec, train_set, idx)?;
            let probs = net.forward_train(&x, &mut dropout_rng)?;
            if !probs.is_finite() {
                return Err(unstable("activations", epoch));
            }
            loss_sum += net.loss(&probs, &y)? * idx.len() as f64;
            hits += accuracy(&probs, &y);
            net.backward(&probs, &y)?;
            for (i, param) in net.params_mut().into_iter().enumerate() {
                if param.grad.iter().any(|g| !g.is_finite()) {
                    return Err(unstable("gradients", epoch));
                }
                opt.step(i, &mut param.value, &param.grad, lr);
            }
        }
        let n = train_set.len() as f64;
        let (train_loss, train_accuracy) = (loss_sum / n, hits as f64 / n);
        let (val_loss, val_accuracy) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate(&net, val)?
        };
        let monitored = if val.is_empty() { train_loss } else { val_loss };
        if !monitored.is_finite() {
            return Err(unstable("loss", epoch));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
            learning_rate: lr,
        });
        let (improved, stop) = stopper.observe(monitored, epoch);
        if improved {
            best_state = net.state();
            history.best_epoch = epoch;
        }
        if stop {
            history.stopped_epoch = Some(epoch);
            break;
        }
        if let Some(next) = plateau.observe(monitored, lr) {
            history.lr_events.push(LrEvent { epoch, from: lr, to: next });
            lr = next;
        }
    }
    net.set_state(&best_state)?;
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};
    use rand::Rng as _;

    /// 8x8 images: class 0 bright top half, class 1 bright bottom half,
    /// class 2 bright left half, plus uniform noise.
    fn toy_images(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = seeded(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 3;
            let img = (0..64)
                .map(|p| {
                    let (r, c) = (p / 8, p % 8);
                    let on = match y {
                        0 => r < 4,
                        1 => r >= 4,
                        _ => c < 4,
                    };
                    f64::from(u8::from(on)) + 0.3 * (rng.random::<f64>() - 0.5)
                })
                .collect();
            xs.push(img);
            ys.push(y);
        }
        (xs, ys)
    }

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![1, 8, 8],
            l2_strength: 0.001,
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: Default::default(),
                    relu: true,
                },
                LayerSpec::Maxpool {
                    window: 2,
                    stride: None,
                },
                LayerSpec::Batchnorm,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 3,
                    activation: Activation::Linear,
                },
                LayerSpec::Softmax,
            ],
        }
    }

    fn run(seed: u64, epochs: usize) -> (Network, History) {
        let (xs, ys) = toy_images(48, 1);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (vx, vy) = toy_images(12, 2);
        let vrefs: Vec<&[f64]> = vx.iter().map(Vec::as_slice).collect();
        let cfg = TrainConfig {
            max_epochs: epochs,
            learning_rate: 1e-2,
            seed,
            ..TrainConfig::default()
        };
        train(
            &small_spec(),
            &Dataset::new(&refs, &ys).unwrap(),
            &Dataset::new(&vrefs, &vy).unwrap(),
            &cfg,
        )
        .unwrap()
    }

    #[test]
    fn separable_images_are_learned() {
        let (_, h) = run(7, 60);
        let best = h.epochs.iter().map(|e| e.train_accuracy).fold(0.0, f64::max);
        assert!(best >= 0.99, "best train accuracy {best}");
    }

    #[test]
    fn same_seed_same_result() {
        let (a, ha) = run(3, 5);
        let (b, hb) = run(3, 5);
        assert_eq!(ha, hb);
        assert_eq!(a.state(), b.state());
        let (c, _) = run(4, 5);
        assert_ne!(a.state(), c.state());
    }

    #[test]
    fn empty_training_set() {
        let empty = Dataset::new(&[], &[]).unwrap();
        let err = train(&small_spec(), &empty, &empty, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, NnError::EmptyDataset(_)));
    }

    #[test]
    fn config_toml_and_validation() {
        let cfg = TrainConfig::from_toml("batch_size = 4\n[plateau]\npatience = 2\n").unwrap();
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.plateau.patience, 2);
        assert_eq!(cfg.plateau.factor, 0.5);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("learning_rate = -1.0").is_err());
        assert!(TrainConfig::from_toml("unknown = 1").is_err());
    }

    #[test]
    fn diverging_run_reports_instability() {
        let (xs, ys) = toy_images(12, 1);
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let huge: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v * f64::MAX).collect()).collect();
        let hrefs: Vec<&[f64]> = huge.iter().map(Vec::as_slice).collect();
        let cfg = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let err = train(
            &small_spec(),
            &Dataset::new(&hrefs, &ys).unwrap(),
            &Dataset::new(&refs, &ys).unwrap(),
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, NnError::NumericalInstability(_)));
    }
}
