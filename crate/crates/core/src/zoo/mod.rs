//! Toy networks and their inputs: architectures, dense training,
//! checkpoints, IDX datasets, a synthetic digit-like generator, and top-1
//! evaluation.

mod checkpoint;
mod idx;
mod model;
pub mod synth;
mod train;

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::ByteReader;
pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx_dataset, parse_idx_images, parse_idx_labels,
    save_idx_dataset, Dataset, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use model::{Architecture, InputShape, Layer, LayerKind, ModelSpec, Network, Normalization};
pub use train::{train_dense, TrainConfig, TrainOutcome};

use crate::error::Result;
use crate::tensor::Tensor;

/// Anything that maps normalized `B × D` inputs to logits.
pub trait Classifier {
    fn normalization(&self) -> Normalization;
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl Classifier for Network {
    fn normalization(&self) -> Normalization {
        Network::normalization(self)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().expect("non-empty shape");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Top-1 accuracy over the whole dataset.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let norm = model.normalization();
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(256) {
        let logits = model.logits(&data.batch(chunk, norm))?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(chunk)
            .filter(|(&p, &i)| p == data.labels()[i] as usize)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(usize);

    impl Classifier for Constant {
        fn normalization(&self) -> Normalization {
            Normalization::default()
        }
        fn logits(&self, x: &Tensor) -> Result<Tensor> {
            let b = x.shape()[0];
            let mut t = Tensor::zeros(&[b, 10]);
            for r in 0..b {
                t.data_mut()[r * 10 + self.0] = 1.0;
            }
            Ok(t)
        }
    }

    #[test]
    fn constant_predictor_on_uniform_labels() {
        let labels: Vec<u8> = (0..1000).map(|i| (i % 10) as u8).collect();
        let data = Dataset::new(vec![0; 1000 * 4], labels, 2, 2, 10).unwrap();
        let acc = evaluate(&Constant(3), &data).unwrap();
        assert!((acc - 0.1).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&acc));
    }
}
