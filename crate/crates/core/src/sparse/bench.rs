use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::model::{run_layers, runtime_layout, DenseMatrix, SparseModel};
use crate::zoo::{InputShape, LayerKind, Network};

/// The dense network on the same `f32` execution path as [`SparseModel`].
#[derive(Clone, Debug)]
pub struct DenseRuntime {
    input: InputShape,
    layers: Vec<(LayerKind, DenseMatrix, Vec<f32>)>,
}

impl DenseRuntime {
    pub fn from_network(net: &Network) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let (rows, cols, w) = runtime_layout(&l.kind, &l.weight);
                let m = DenseMatrix { rows, cols, values: w.iter().map(|&v| v as f32).collect() };
                (l.kind, m, l.bias.data().iter().map(|&b| b as f32).collect())
            })
            .collect();
        Self { input: net.spec().input, layers }
    }

    pub fn memory_bytes(&self) -> usize {
        self.layers.iter().map(|(_, m, _)| 4 * m.values.len()).sum()
    }

    /// Logits for `batch` rows of normalized `f32` inputs. Panics unless
    /// `x.len() == batch * D`.
    pub fn forward_f32(&self, x: &[f32], batch: usize) -> Vec<f32> {
        let layers: Vec<(LayerKind, &DenseMatrix, &[f32])> =
            self.layers.iter().map(|(k, m, b)| (*k, m, b.as_slice())).collect();
        run_layers(&layers, self.input, x, batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batch: 64, warmup: 5, repetitions: 30, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub batch: usize,
    pub repetitions: usize,
    /// Median milliseconds per batch.
    pub latency_sparse_ms: f64,
    pub latency_dense_ms: f64,
    pub speedup: f64,
    pub bytes_sparse: usize,
    pub bytes_dense: usize,
}

impl BenchResult {
    pub fn memory_ratio(&self) -> f64 {
        self.bytes_sparse as f64 / self.bytes_dense as f64
    }
}

fn median_ms(mut run: impl FnMut(), warmup: usize, reps: usize) -> f64 {
    for _ in 0..warmup {
        run();
    }
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            run();
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let mid = reps / 2;
    if reps % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    }
}

/// Times one forward batch of the sparse model against the dense network
/// on identical random inputs.
pub fn bench(sparse: &SparseModel, dense: &Network, cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.repetitions < 30 {
        return Err(Error::Config(format!("need at least 30 repetitions, got {}", cfg.repetitions)));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    if sparse.input() != dense.spec().input || sparse.weight_counts() != dense.weight_counts() {
        return Err(Error::Contract("sparse and dense models differ in architecture".into()));
    }
    let d = sparse.input().numel();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x: Vec<f32> = (0..cfg.batch * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let runtime = DenseRuntime::from_network(dense);
    let latency_dense_ms = median_ms(
        || {
            std::hint::black_box(runtime.forward_f32(std::hint::black_box(&x), cfg.batch));
        },
        cfg.warmup,
        cfg.repetitions,
    );
    let latency_sparse_ms = median_ms(
        || {
            std::hint::black_box(sparse.forward_f32(std::hint::black_box(&x), cfg.batch));
        },
        cfg.warmup,
        cfg.repetitions,
    );
    Ok(BenchResult {
        batch: cfg.batch,
        repetitions: cfg.repetitions,
        latency_sparse_ms,
        latency_dense_ms,
        speedup: latency_dense_ms / latency_sparse_ms,
        bytes_sparse: sparse.memory_bytes(),
        bytes_dense: runtime.memory_bytes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::model::to_f32;
    use crate::tensor::Tensor;
    use crate::zoo::{Architecture, ModelSpec};

    #[test]
    fn dense_runtime_matches_graph_forward() {
        let input = InputShape { channels: 1, height: 8, width: 8 };
        let net = Network::init(ModelSpec::new(Architecture::Cnn2Conv2Fc, input, 10).unwrap(), 3);
        let x = Tensor::full(&[2, 64], 0.5);
        let want = net.forward(&x).unwrap();
        let got = DenseRuntime::from_network(&net).forward_f32(&to_f32(&x), 2);
        for (a, b) in got.iter().zip(want.data()) {
            assert!((*a as f64 - b).abs() <= 1e-5 * want.max_abs());
        }
    }

    #[test]
    fn memory_ratio_at_seventy_percent() {
        let input = InputShape { channels: 1, height: 28, width: 28 };
        let net = Network::init(ModelSpec::new(Architecture::MLP_3X256, input, 10).unwrap(), 1);
        let rates = vec![0.7; 4];
        let thresholds: Vec<f64> = net
            .layers()
            .iter()
            .zip(&rates)
            .map(|(l, &r)| {
                let mut mags: Vec<f64> = l.weight.data().iter().map(|w| w.abs()).collect();
                mags.sort_by(f64::total_cmp);
                mags[(r * mags.len() as f64) as usize - 1]
            })
            .collect();
        let sparse = SparseModel::from_thresholds(&net, &thresholds).unwrap();
        assert!((sparse.global_rate() - 0.7).abs() < 1e-3);
        let cfg = BenchConfig { batch: 8, warmup: 1, repetitions: 30, seed: 0 };
        let res = bench(&sparse, &net, &cfg).unwrap();
        assert!(res.memory_ratio() < 0.5, "{}", res.memory_ratio());
        assert!(res.speedup > 0.0);
        assert!(bench(&sparse, &net, &BenchConfig { repetitions: 29, ..cfg }).is_err());
    }
}
