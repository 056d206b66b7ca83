use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::zoo::idx::Dataset;
use crate::zoo::model::{ModelSpec, Network};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 64, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    /// Mean cross-entropy of the last epoch (NaN with zero epochs).
    pub final_loss: f64,
}

/// Cross-entropy of `logits` against one-hot `labels`, batch-averaged.
pub(crate) fn cross_entropy(g: &mut Graph, logits: Var, labels: &[u8], classes: usize) -> Result<Var> {
    let b = labels.len();
    let mut onehot = vec![0.0; b * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l as usize] = -1.0 / b as f64;
    }
    let p = g.softmax(logits);
    let lp = g.log(p).map_err(|e| Error::Numeric(format!("cross-entropy: {e}")))?;
    let t = g.constant(Tensor::from_parts(vec![b, classes], onehot));
    let prod = g.mul(lp, t)?;
    Ok(g.sum(prod))
}

/// Trains a freshly initialized `spec` network with Adam on cross-entropy.
/// Deterministic under `cfg.seed`; zero epochs returns the initialization.
pub fn train_dense(spec: ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if data.input_shape() != spec.input {
        return Err(Error::Contract(format!(
            "dataset images {:?} do not match model input {:?}",
            data.input_shape(),
            spec.input
        )));
    }
    if data.classes() > spec.classes {
        return Err(Error::Contract("dataset has more classes than the model".into()));
    }
    let mut net = Network::init(spec, cfg.seed);
    let norm = data.pixel_statistics();
    net.set_normalization(norm);
    let classes = net.spec().classes;
    let sizes: Vec<usize> = net.layers().iter().flat_map(|l| [l.weight.len(), l.bias.len()]).collect();
    let mut adam = Adam::new(&sizes);
    // distinct stream from the initializer
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut first_loss = None;
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = data.batch(chunk, norm);
            let labels: Vec<u8> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let wv: Vec<Var> = net.layers().iter().map(|l| g.param(l.weight.clone())).collect();
            let bv: Vec<Var> = net.layers().iter().map(|l| g.param(l.bias.clone())).collect();
            let logits = net.forward_graph(&mut g, xv, &wv, &bv)?;
            let loss = cross_entropy(&mut g, logits, &labels, classes)?;
            let value = g.value(loss).item()?;
            let initial = *first_loss.get_or_insert(value);
            if !value.is_finite() || value > 1e3 * initial.max(1e-12) {
                return Err(Error::Divergence(format!(
                    "training loss {value} at epoch {epoch} (initial {initial})"
                )));
            }
            g.backward(loss)?;
            adam.begin_step();
            for (i, layer) in net.layers_mut().iter_mut().enumerate() {
                let gw = g.grad(wv[i]).expect("weights feed the loss").clone();
                let gb = g.grad(bv[i]).expect("biases feed the loss").clone();
                adam.apply(2 * i, layer.weight.data_mut(), gw.data(), cfg.learning_rate, None);
                adam.apply(2 * i + 1, layer.bias.data_mut(), gb.data(), cfg.learning_rate, None);
            }
            total += value;
            batches += 1;
        }
        final_loss = total / batches as f64;
    }
    Ok(TrainOutcome { network: net, final_loss })
}
