use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fnirs_gaf::gaf::{gasf, rescale};
use fnirs_gaf::nn::Network;
use fnirs_gaf::preprocess::{butterworth_coefficients, filtfilt};
use fnirs_gaf::rng::seeded;
use fnirs_gaf::{FilterSpec, NetworkSpec, Tensor};
use rand::Rng as _;

fn series(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn bench_gasf(c: &mut Criterion) {
    let mut group = c.benchmark_group("gasf");
    for n in [32, 64, 128] {
        let x = series(n, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| gasf(&rescale(black_box(x)).unwrap()))
        });
    }
    group.finish();
}

fn bench_filtfilt(c: &mut Criterion) {
    let cascade = butterworth_coefficients(&FilterSpec::default(), 13.3).unwrap();
    let x = series(40_000, 2);
    c.bench_function("filtfilt 40k samples", |b| b.iter(|| filtfilt(black_box(&x), &cascade).unwrap()));
}

fn bench_cnn(c: &mut Criterion) {
    let mut group = c.benchmark_group("cnn");
    group.sample_size(10);
    for size in [32, 64] {
        let spec = NetworkSpec::default_architecture(size);
        let mut net = Network::new(&spec, 3).unwrap();
        let batch = 16;
        let x = Tensor::new(vec![batch, 1, size, size], series(batch * size * size, 4)).unwrap();
        let labels: Vec<usize> = (0..batch).map(|i| i % 3).collect();
        group.bench_function(BenchmarkId::new("forward", size), |b| b.iter(|| net.infer(black_box(&x)).unwrap()));
        group.bench_function(BenchmarkId::new("forward_backward", size), |b| {
            b.iter(|| {
                let p = net.forward_train(&x, &mut seeded(5)).unwrap();
                net.backward(&p, &labels).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gasf, bench_filtfilt, bench_cnn);
criterion_main!(benches);
