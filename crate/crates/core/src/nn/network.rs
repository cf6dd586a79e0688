use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d, Dense, Dropout, Layer, MaxPool2d, Param, Softmax};
use super::{NnError, Tensor};
use crate::rng::{seeded, Rng};
use crate::N_CLASSES;

pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const BATCHNORM_EPSILON: f64 = 1e-5;
/// Added inside the log of the cross-entropy.
pub const LOG_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// `(kernel - 1) / 2` on every side; output size `ceil(n / stride)`.
    Same,
    Valid,
}

/// Zero padding: `"same"`, `"valid"` or an explicit pixel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Padding {
    Mode(PaddingMode),
    Pixels(usize),
}

impl Default for Padding {
    fn default() -> Self {
        Padding::Mode(PaddingMode::Same)
    }
}

impl Padding {
    fn pixels(self, kernel: usize) -> Result<usize, NnError> {
        match self {
            Padding::Mode(PaddingMode::Valid) => Ok(0),
            Padding::Pixels(p) => Ok(p),
            Padding::Mode(PaddingMode::Same) if kernel % 2 == 1 => Ok((kernel - 1) / 2),
            Padding::Mode(PaddingMode::Same) => Err(NnError::InvalidConfig(format!(
                "\"same\" padding needs an odd kernel, got {kernel}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Linear,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// One layer of a [`NetworkSpec`], tagged by `type` in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
        #[serde(default = "yes")]
        relu: bool,
    },
    Maxpool {
        window: usize,
        /// Defaults to the window size.
        #[serde(default)]
        stride: Option<usize>,
    },
    Batchnorm,
    Flatten,
    Dense {
        units: usize,
        #[serde(default)]
        activation: Activation,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

fn default_input_shape() -> Vec<usize> {
    vec![1, 64, 64]
}

fn default_l2() -> f64 {
    0.3
}

/// Layer list plus input shape `[channels, height, width]` and the L2
/// strength applied to conv and dense kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default = "default_input_shape")]
    pub input_shape: Vec<usize>,
    #[serde(default = "default_l2")]
    pub l2_strength: f64,
    pub layers: Vec<LayerSpec>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec::default_architecture(64)
    }
}

impl NetworkSpec {
    /// Four conv/pool pairs (8, 16, 32, 64 filters of 3x3), batch norm,
    /// dense(64, relu), dropout(0.5), dense(3), softmax on a `size x size`
    /// single-channel image.
    pub fn default_architecture(size: usize) -> Self {
        NetworkSpec::conv_stack(size, [8, 16, 32, 64], 64, 0.5)
    }

    /// The default layer sequence with custom filter counts and dense width.
    pub fn conv_stack(size: usize, filters: [usize; 4], dense_units: usize, dropout: f64) -> Self {
        let mut layers = Vec::new();
        for f in filters {
            layers.push(LayerSpec::Conv2d {
                out_channels: f,
                kernel: 3,
                stride: 1,
                padding: Padding::Mode(PaddingMode::Same),
                relu: true,
            });
            layers.push(LayerSpec::Maxpool {
                window: 2,
                stride: None,
            });
        }
        layers.extend([
            LayerSpec::Batchnorm,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                units: dense_units,
                activation: Activation::Relu,
            },
            LayerSpec::Dropout { rate: dropout },
            LayerSpec::Dense {
                units: N_CLASSES,
                activation: Activation::Linear,
            },
            LayerSpec::Softmax,
        ]);
        NetworkSpec {
            input_shape: vec![1, size, size],
            l2_strength: 0.3,
            layers,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, NnError> {
        let spec: NetworkSpec = toml::from_str(text).map_err(|e| NnError::InvalidConfig(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serializes to TOML")
    }

    /// Per-item output shape after every layer; checks compatibility, a
    /// terminal softmax and three output units.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let bad = |m: String| NnError::InvalidConfig(m);
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(bad(format!("input shape {:?} has a zero or is empty", self.input_shape)));
        }
        if !(self.l2_strength >= 0.0 && self.l2_strength.is_finite()) {
            return Err(bad(format!("l2_strength must be finite and >= 0, got {}", self.l2_strength)));
        }
        if self.layers.last() != Some(&LayerSpec::Softmax) {
            return Err(bad("the last layer must be softmax".into()));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let at = |m: &str| bad(format!("layer {i} ({layer:?}): {m}, input shape {shape:?}"));
            shape = match *layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let [_, h, w] = shape[..] else {
                        return Err(at("needs [channels, height, width] input"));
                    };
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(at("out_channels, kernel and stride must be positive"));
                    }
                    let p = padding.pixels(kernel)?;
                    if h + 2 * p < kernel || w + 2 * p < kernel {
                        return Err(at("kernel larger than padded input"));
                    }
                    vec![out_channels, (h + 2 * p - kernel) / stride + 1, (w + 2 * p - kernel) / stride + 1]
                }
                LayerSpec::Maxpool { window, stride } => {
                    let [c, h, w] = shape[..] else {
                        return Err(at("needs [channels, height, width] input"));
                    };
                    let s = stride.unwrap_or(window);
                    if window == 0 || s == 0 || h < window || w < window {
                        return Err(at("window must be positive and fit the input"));
                    }
                    vec![c, (h - window) / s + 1, (w - window) / s + 1]
                }
                LayerSpec::Batchnorm => {
                    if shape.len() != 1 && shape.len() != 3 {
                        return Err(at("needs flat or image input"));
                    }
                    shape.clone()
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Dense { units, .. } => {
                    if shape.len() != 1 {
                        return Err(at("needs flat input; add a flatten layer"));
                    }
                    if units == 0 {
                        return Err(at("units must be positive"));
                    }
                    vec![units]
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(at("rate must be in [0, 1)"));
                    }
                    shape.clone()
                }
                LayerSpec::Softmax => {
                    if shape.len() != 1 {
                        return Err(at("needs flat input"));
                    }
                    shape.clone()
                }
            };
            shapes.push(shape.clone());
        }
        if shape != [N_CLASSES] {
            return Err(bad(format!("network must output {N_CLASSES} classes, got shape {shape:?}")));
        }
        Ok(shapes)
    }
}

/// A network instance: layers with parameters, built from a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

impl Network {
    /// Builds the layers, drawing Glorot-uniform kernels from `seed`.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = seeded(seed);
        let mut shape = spec.input_shape.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let layer = match *ls {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    relu,
                } => Layer::Conv2d(Conv2d::new(
                    shape[0],
                    out_channels,
                    kernel,
                    stride,
                    padding.pixels(kernel)?,
                    relu,
                    &mut rng,
                )),
                LayerSpec::Maxpool { window, stride } => Layer::MaxPool2d(MaxPool2d::new(window, stride.unwrap_or(window))),
                LayerSpec::Batchnorm => Layer::BatchNorm(BatchNorm::new(shape[0], BATCHNORM_MOMENTUM, BATCHNORM_EPSILON)),
                LayerSpec::Flatten => Layer::Flatten(None),
                LayerSpec::Dense { units, activation } => {
                    Layer::Dense(Dense::new(shape[0], units, activation == Activation::Relu, &mut rng))
                }
                LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(rate)),
                LayerSpec::Softmax => Layer::Softmax(Softmax::default()),
            };
            let probe = Tensor::zeros(&[&[1][..], &shape[..]].concat());
            shape = layer.forward_eval(&probe)?.shape()[1..].to_vec();
            layers.push(layer);
        }
        Ok(Network { spec: spec.clone(), layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        if x.shape().len() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(NnError::ShapeMismatch(format!(
                "network expects [batch, {:?}], got {:?}",
                self.spec.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Training-mode probabilities; caches activations for [`backward`](Self::backward).
    pub fn forward_train(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward_train(&h, rng)?;
        }
        Ok(h)
    }

    /// Eval-mode probabilities `[batch, 3]`.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        let mut h = self.layers[0].forward_eval(x)?;
        for layer in &self.layers[1..] {
            h = layer.forward_eval(&h)?;
        }
        Ok(h)
    }

    /// Eval-mode probabilities for a list of flat items.
    pub fn predict_proba_batch(&self, items: &[&[f64]]) -> Result<Vec<[f64; 3]>, NnError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let x = Tensor::stack(&self.spec.input_shape, items)?;
        let p = self.infer(&x)?;
        Ok(p.data().chunks(N_CLASSES).map(|r| [r[0], r[1], r[2]]).collect())
    }

    /// `l2_strength * sum of squared kernel weights`, compensated summation.
    pub fn l2_penalty(&self) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for p in self.params().into_iter().filter(|p| p.decay) {
            for w in &p.value {
                let term = w * w;
                let t = sum + term;
                comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
                sum = t;
            }
        }
        self.spec.l2_strength * (sum + comp)
    }

    /// Mean categorical cross-entropy plus the L2 penalty.
    pub fn loss(&self, probs: &Tensor, labels: &[usize]) -> Result<f64, NnError> {
        Ok(cross_entropy(probs, labels)? + self.l2_penalty())
    }

    /// Backpropagates the loss for the batch last passed to
    /// [`forward_train`](Self::forward_train), leaving every gradient in
    /// [`Param::grad`].
    pub fn backward(&mut self, probs: &Tensor, labels: &[usize]) -> Result<(), NnError> {
        check_labels(probs, labels)?;
        let b = labels.len() as f64;
        let mut grad = vec![0.0; probs.len()];
        for (i, &y) in labels.iter().enumerate() {
            grad[i * N_CLASSES + y] = -1.0 / (probs.data()[i * N_CLASSES + y] + LOG_EPSILON) / b;
        }
        let mut g = Tensor::new(probs.shape().to_vec(), grad)?;
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        let l2 = self.spec.l2_strength;
        for p in self.params_mut().into_iter().filter(|p| p.decay) {
            for (gv, w) in p.grad.iter_mut().zip(&p.value) {
                *gv += 2.0 * l2 * w;
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Every trainable value and buffer, in a fixed order.
    pub fn state(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.params().into_iter().map(|p| p.value.clone()));
            out.extend(layer.buffers().into_iter().map(|(_, b)| b.to_vec()));
        }
        out
    }

    /// Inverse of [`state`](Self::state).
    pub fn set_state(&mut self, state: &[Vec<f64>]) -> Result<(), NnError> {
        let mut it = state.iter();
        for layer in &mut self.layers {
            for t in layer.state_mut() {
                let src = it
                    .next()
                    .ok_or_else(|| NnError::ShapeMismatch("state has too few arrays".into()))?;
                if src.len() != t.len() {
                    return Err(NnError::ShapeMismatch(format!(
                        "state array has {} values, expected {}",
                        src.len(),
                        t.len()
                    )));
                }
                t.copy_from_slice(src);
            }
        }
        if it.next().is_some() {
            return Err(NnError::ShapeMismatch("state has too many arrays".into()));
        }
        Ok(())
    }
}

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<(), NnError> {
    if probs.shape() != [labels.len(), N_CLASSES] {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for probabilities of shape {:?}",
            labels.len(),
            probs.shape()
        )));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= N_CLASSES) {
        return Err(NnError::DimensionMismatch(format!("label {y} is not a class index")));
    }
    Ok(())
}

/// Mean over the batch of `-ln(p[label] + 1e-12)`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64, NnError> {
    check_labels(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -(probs.data()[i * N_CLASSES + y] + LOG_EPSILON).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn dense_only(l2: f64) -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![4],
            l2_strength: l2,
            layers: vec![
                LayerSpec::Dense {
                    units: 3,
                    activation: Activation::Linear,
                },
                LayerSpec::Softmax,
            ],
        }
    }

    fn zero_weights(net: &mut Network) {
        for p in net.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn default_architecture_shapes() {
        let spec = NetworkSpec::default();
        let shapes = spec.validate().unwrap();
        assert_eq!(shapes[7], vec![64, 4, 4]);
        assert_eq!(shapes[9], vec![1024]);
        assert_eq!(shapes.last().unwrap(), &vec![3]);
        assert_eq!(spec.layers.len(), 14);
        let net = Network::new(&spec, 1).unwrap();
        let p = net.predict_proba_batch(&[&vec![0.5; 64 * 64][..]]).unwrap();
        assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn toml_round_trip() {
        let spec = NetworkSpec::default();
        let text = spec.to_toml();
        assert_eq!(NetworkSpec::from_toml(&text).unwrap(), spec);
        let parsed = NetworkSpec::from_toml(
            r#"
            input_shape = [1, 8, 8]
            [[layers]]
            type = "conv2d"
            out_channels = 2
            kernel = 3
            padding = 1
            [[layers]]
            type = "maxpool"
            window = 2
            [[layers]]
            type = "flatten"
            [[layers]]
            type = "dense"
            units = 3
            [[layers]]
            type = "softmax"
            "#,
        )
        .unwrap();
        assert_eq!(parsed.l2_strength, 0.3);
        assert_eq!(parsed.validate().unwrap()[1], vec![2, 4, 4]);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = dense_only(0.0);
        spec.layers.pop();
        assert!(matches!(spec.validate(), Err(NnError::InvalidConfig(_))));
        let mut spec = dense_only(0.0);
        spec.layers[0] = LayerSpec::Dense {
            units: 4,
            activation: Activation::Linear,
        };
        assert!(spec.validate().is_err());
        let mut spec = NetworkSpec::default();
        spec.input_shape = vec![1, 8, 8];
        assert!(spec.validate().is_err());
        let mut spec = NetworkSpec::default();
        spec.layers[0] = LayerSpec::Conv2d {
            out_channels: 8,
            kernel: 2,
            stride: 1,
            padding: Padding::Mode(PaddingMode::Same),
            relu: true,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_dense_gives_uniform() {
        let mut net = Network::new(&dense_only(0.3), 0).unwrap();
        zero_weights(&mut net);
        let p = net.predict_proba_batch(&[&[1.0, -2.0, 3.0, 0.5][..]]).unwrap();
        for v in p[0] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let probs = Tensor::new(vec![1, 3], p[0].to_vec()).unwrap();
        assert!((net.loss(&probs, &[2]).unwrap() - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_examples() {
        let mut net = Network::new(&dense_only(0.3), 0).unwrap();
        zero_weights(&mut net);
        let perfect = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(net.loss(&perfect, &[0, 2]).unwrap().abs() < 1e-9);
        let ce = cross_entropy(&perfect, &[0, 2]).unwrap();
        if let Layer::Dense(d) = &mut net.layers_mut()[0] {
            d.weight.value[0] = 2.0;
            d.weight.value[5] = -1.0;
            d.bias.value[1] = 10.0;
        }
        // 0.3 * (4 + 1); biases excluded
        assert_eq!(net.loss(&perfect, &[0, 2]).unwrap() - ce, 0.3 * 5.0);
    }

    #[test]
    fn zero_input_bias_gradient_is_mean_residual() {
        let mut net = Network::new(&dense_only(0.3), 5).unwrap();
        let x = Tensor::zeros(&[4, 4]);
        let labels = [0, 1, 2, 1];
        let p = net.forward_train(&x, &mut seeded(0)).unwrap();
        net.backward(&p, &labels).unwrap();
        let Layer::Dense(d) = &net.layers()[0] else { panic!() };
        for k in 0..3 {
            let want: f64 = (0..4)
                .map(|i| p.data()[i * 3 + k] - if labels[i] == k { 1.0 } else { 0.0 })
                .sum::<f64>()
                / 4.0;
            assert!((d.bias.grad[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_batch_keeps_gradients() {
        let spec = NetworkSpec {
            input_shape: vec![5],
            l2_strength: 0.1,
            layers: vec![
                LayerSpec::Dense {
                    units: 6,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: 3,
                    activation: Activation::Linear,
                },
                LayerSpec::Softmax,
            ],
        };
        let mut rng = seeded(3);
        let rows: Vec<f64> = (0..15).map(|_| rng.random::<f64>() - 0.5).collect();
        let labels = [0, 2, 1];
        let grads = |x: Tensor, labels: &[usize]| {
            let mut net = Network::new(&spec, 9).unwrap();
            let p = net.forward_train(&x, &mut seeded(0)).unwrap();
            net.backward(&p, labels).unwrap();
            net.params().iter().map(|p| p.grad.clone()).collect::<Vec<_>>()
        };
        let single = grads(Tensor::new(vec![3, 5], rows.clone()).unwrap(), &labels);
        let doubled = grads(
            Tensor::new(vec![6, 5], [rows.clone(), rows].concat()).unwrap(),
            &[labels, labels].concat(),
        );
        for (a, b) in single.iter().flatten().zip(doubled.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn state_round_trip() {
        let spec = NetworkSpec::conv_stack(16, [2, 2, 2, 2], 4, 0.5);
        let a = Network::new(&spec, 1).unwrap();
        let mut b = Network::new(&spec, 2).unwrap();
        assert_ne!(a.state(), b.state());
        b.set_state(&a.state()).unwrap();
        assert_eq!(a.state(), b.state());
        assert!(b.set_state(&a.state()[1..]).is_err());
    }

    #[test]
    fn wrong_input_shape() {
        let net = Network::new(&NetworkSpec::conv_stack(16, [2, 2, 2, 2], 4, 0.5), 1).unwrap();
        assert!(matches!(net.infer(&Tensor::zeros(&[1, 1, 8, 8])), Err(NnError::ShapeMismatch(_))));
    }
}
