use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ptsparse_core::kde::KdeModel;
use ptsparse_core::sparse::DenseRuntime;
use ptsparse_core::zoo::InputShape;
use ptsparse_core::{Architecture, KdeConfig, ModelSpec, Network, SparseModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

const MNIST: InputShape = InputShape { channels: 1, height: 28, width: 28 };

/// Magnitude thresholds that prune `rate` of every layer.
fn thresholds(net: &Network, rate: f64) -> Vec<f64> {
    net.layers()
        .iter()
        .map(|l| {
            let mut mags: Vec<f64> = l.weight.data().iter().map(|v| v.abs()).collect();
            mags.sort_by(f64::total_cmp);
            mags[((rate * mags.len() as f64) as usize).min(mags.len() - 1)]
        })
        .collect()
}

fn forward(c: &mut Criterion) {
    let batch = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f32> = (0..batch * MNIST.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    for arch in [Architecture::MLP_3X256, Architecture::Cnn2Conv2Fc] {
        let net = Network::init(ModelSpec::new(arch.clone(), MNIST, 10).unwrap(), 1);
        let mut group = c.benchmark_group(format!("forward/{arch}"));
        group.throughput(Throughput::Elements(batch as u64));
        let dense = DenseRuntime::from_network(&net);
        group.bench_function("dense", |b| b.iter(|| dense.forward_f32(black_box(&x), batch)));
        for rate in [0.5, 0.7, 0.9] {
            let sparse = SparseModel::from_thresholds(&net, &thresholds(&net, rate)).unwrap();
            group.bench_with_input(BenchmarkId::new("csr", rate), &sparse, |b, s| {
                b.iter(|| s.forward_f32(black_box(&x), batch))
            });
        }
        group.finish();
    }
}

fn bridge(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let weights: Vec<f64> = (0..200_000).map(|_| rng.random_range(-0.1..0.1)).collect();
    let mut group = c.benchmark_group("kde");
    group.bench_function("fit/200k", |b| b.iter(|| KdeModel::fit(black_box(&weights), &KdeConfig::default(), 0).unwrap()));
    let model = KdeModel::fit(&weights, &KdeConfig::default(), 0).unwrap();
    group.bench_function("rate", |b| b.iter(|| model.rate(black_box(0.05)).unwrap()));
    group.bench_function("rate_derivative", |b| b.iter(|| model.rate_derivative(black_box(0.05))));
    group.bench_function("invert", |b| b.iter(|| model.invert(black_box(0.7), 1e-6).unwrap()));
    group.finish();

    c.bench_function("kde/hard_count/200k", |b| {
        b.iter(|| ptsparse_core::kde::empirical_sparsity(black_box(&weights), 0.05))
    });
}

criterion_group!(benches, forward, bridge);
criterion_main!(benches);
