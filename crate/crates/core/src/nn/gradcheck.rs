//! Central-difference checks of every analytic gradient.

use rand::{Rng as _, SeedableRng};

use super::*;
use crate::rng::{seeded, Rng};

const DELTA: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely, since central
/// differences cannot resolve them relative to the loss's rounding noise.
const FLOOR: f64 = 1e-6;

const MASK_SEED: u64 = 99;

fn loss_at(net: &mut Network, x: &Tensor, labels: &[usize]) -> f64 {
    let probs = net.forward_train(x, &mut seeded(MASK_SEED)).unwrap();
    net.loss(&probs, labels).unwrap()
}

/// Offsets (in units of the step) tried when the difference interval
/// straddles a ReLU or max-pool switch.
const SHIFTS: [f64; 7] = [0.0, 3.0, -3.0, 7.0, -7.0, 13.0, -13.0];

fn analytic_grad(net: &mut Network, x: &Tensor, labels: &[usize], pi: usize, j: usize) -> f64 {
    let probs = net.forward_train(x, &mut seeded(MASK_SEED)).unwrap();
    net.backward(&probs, labels).unwrap();
    net.params()[pi].grad[j]
}

/// Relative error of entry `j` of parameter `pi`. When the one-sided slopes
/// disagree by more than the mismatch, the interval crosses a kink and the
/// check moves to a nearby point.
fn entry_error(net: &mut Network, x: &Tensor, labels: &[usize], pi: usize, j: usize) -> f64 {
    let orig = net.params()[pi].value[j];
    let mut worst = f64::INFINITY;
    for shift in SHIFTS {
        let centre = orig + shift * DELTA;
        net.params_mut()[pi].value[j] = centre;
        let a = analytic_grad(net, x, labels, pi, j);
        let base = loss_at(net, x, labels);
        net.params_mut()[pi].value[j] = centre + DELTA;
        let up = loss_at(net, x, labels);
        net.params_mut()[pi].value[j] = centre - DELTA;
        let down = loss_at(net, x, labels);
        let numeric = (up - down) / (2.0 * DELTA);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        let asymmetry = ((up - base) - (base - down)).abs() / DELTA;
        worst = rel;
        if rel < TOL || asymmetry <= (a - numeric).abs() {
            break;
        }
    }
    net.params_mut()[pi].value[j] = orig;
    worst
}

/// Largest relative error over up to `per_array` entries of every parameter.
fn max_rel_error(net: &mut Network, x: &Tensor, labels: &[usize], per_array: usize, rng: &mut Rng) -> f64 {
    let sizes: Vec<usize> = net.params().iter().map(|p| p.value.len()).collect();
    let mut worst = 0.0f64;
    for (pi, &n) in sizes.iter().enumerate() {
        let picks: Vec<usize> = if n <= per_array {
            (0..n).collect()
        } else {
            (0..per_array).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            worst = worst.max(entry_error(net, x, labels, pi, j));
        }
    }
    worst
}

fn random_input(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

fn check(spec: &NetworkSpec, batch: usize, seed: u64, per_array: usize) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let mut net = Network::new(spec, seed).unwrap();
    let shape = [&[batch][..], &spec.input_shape[..]].concat();
    let x = random_input(&shape, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % 3).collect();
    max_rel_error(&mut net, &x, &labels, per_array, &mut rng)
}

fn head(mut layers: Vec<LayerSpec>) -> Vec<LayerSpec> {
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense {
            units: 3,
            activation: Activation::Linear,
        },
        LayerSpec::Softmax,
    ]);
    layers
}

fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize, relu: bool) -> LayerSpec {
    LayerSpec::Conv2d {
        out_channels,
        kernel,
        stride,
        padding: Padding::Pixels(padding),
        relu,
    }
}

#[test]
fn conv_layers() {
    for (i, &(k, s, p, relu)) in [(3, 1, 1, true), (3, 2, 0, false), (2, 1, 0, true), (1, 1, 0, false), (3, 2, 2, true)]
        .iter()
        .enumerate()
    {
        let spec = NetworkSpec {
            input_shape: vec![2, 6, 5],
            l2_strength: 0.3,
            layers: head(vec![conv(3, k, s, p, relu), conv(2, 3, 1, 1, false)]),
        };
        let err = check(&spec, 3, i as u64, 200);
        assert!(err < TOL, "conv k{k} s{s} p{p}: {err:e}");
    }
}

#[test]
fn maxpool_layers() {
    for (window, stride) in [(2, 2), (3, 1), (2, 1)] {
        let spec = NetworkSpec {
            input_shape: vec![1, 7, 6],
            l2_strength: 0.1,
            layers: head(vec![
                conv(2, 3, 1, 1, false),
                LayerSpec::Maxpool {
                    window,
                    stride: Some(stride),
                },
            ]),
        };
        let err = check(&spec, 2, window as u64, 200);
        assert!(err < TOL, "maxpool {window}/{stride}: {err:e}");
    }
}

#[test]
fn batchnorm_layers() {
    let image = NetworkSpec {
        input_shape: vec![2, 4, 4],
        l2_strength: 0.3,
        layers: head(vec![conv(3, 3, 1, 1, true), LayerSpec::Batchnorm]),
    };
    assert!(check(&image, 4, 1, 200) < TOL);
    let flat = NetworkSpec {
        input_shape: vec![6],
        l2_strength: 0.3,
        layers: vec![
            LayerSpec::Dense {
                units: 5,
                activation: Activation::Linear,
            },
            LayerSpec::Batchnorm,
            LayerSpec::Dense {
                units: 3,
                activation: Activation::Linear,
            },
            LayerSpec::Softmax,
        ],
    };
    assert!(check(&flat, 5, 2, 200) < TOL);
}

#[test]
fn dense_and_dropout_layers() {
    let spec = NetworkSpec {
        input_shape: vec![7],
        l2_strength: 0.05,
        layers: vec![
            LayerSpec::Dense {
                units: 6,
                activation: Activation::Relu,
            },
            LayerSpec::Dropout { rate: 0.4 },
            LayerSpec::Dense {
                units: 3,
                activation: Activation::Linear,
            },
            LayerSpec::Softmax,
        ],
    };
    assert!(check(&spec, 4, 3, 200) < TOL);
}

#[test]
fn full_default_network() {
    let err = check(&NetworkSpec::default(), 4, 5, 12);
    assert!(err < TOL, "{err:e}");
}

#[test]
fn small_step_does_not_increase_loss() {
    let mut spec = NetworkSpec::conv_stack(16, [3, 4, 4, 5], 8, 0.0);
    spec.l2_strength = 0.0;
    let mut rng = Rng::seed_from_u64(8);
    let x = random_input(&[6, 1, 16, 16], &mut rng);
    let labels = [0, 1, 2, 0, 1, 2];
    let mut net = Network::new(&spec, 8).unwrap();
    let before = loss_at(&mut net, &x, &labels);
    let probs = net.forward_train(&x, &mut seeded(MASK_SEED)).unwrap();
    net.backward(&probs, &labels).unwrap();
    for p in net.params_mut() {
        for (v, g) in p.value.iter_mut().zip(&p.grad) {
            *v -= 1e-6 * g;
        }
    }
    assert!(loss_at(&mut net, &x, &labels) <= before);
}
