//! Magnitude masks and the gradients that flow through them.

use crate::error::{Error, Result};
use crate::kde::{std_normal_cdf, std_normal_pdf};
use crate::tensor::Tensor;
use crate::zoo::Network;

/// Hard mask of one layer at a given threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub layer: usize,
    pub threshold: f64,
    pub mask: Tensor,
}

impl MaskSpec {
    pub fn new(layer: usize, weights: &Tensor, threshold: f64) -> Self {
        Self { layer, threshold, mask: gen_mask(weights, threshold) }
    }

    /// Fraction of zero entries.
    pub fn sparsity(&self) -> f64 {
        mask_sparsity(&self.mask)
    }
}

/// `M = 1` where `|w| > t`, else `0`. A tie `|w| = t` is pruned since the sign
/// of zero counts as negative.
pub fn gen_mask(weights: &Tensor, t: f64) -> Tensor {
    weights.map(|w| if w.abs() - t > 0.0 { 1.0 } else { 0.0 })
}

pub fn mask_sparsity(mask: &Tensor) -> f64 {
    mask.data().iter().filter(|&&m| m == 0.0).count() as f64 / mask.len() as f64
}

/// `M ⊙ W`.
pub fn apply_mask(weights: &Tensor, mask: &Tensor) -> Result<Tensor> {
    weights.zip_map(mask, |w, m| w * m)
}

/// Surrogate for `∂M/∂t`: the step in `|w| − t` is replaced by a Gaussian
/// CDF of width `window_h`, whose derivative is
/// `−φ((|w| − t)/window_h) / window_h`. Entries are never positive.
pub fn grad_mask_wrt_t(weights: &Tensor, t: f64, window_h: f64) -> Result<Tensor> {
    if !(window_h > 0.0) {
        return Err(Error::Contract(format!("mask window must be positive, got {window_h}")));
    }
    Ok(weights.map(|w| -std_normal_pdf((w.abs() - t) / window_h) / window_h))
}

/// The smooth mask `Φ((|w| − t)/window_h)` whose `t`-derivative is exactly
/// [`grad_mask_wrt_t`]. Used to check the threshold gradient end to end.
pub fn smoothed_mask(weights: &Tensor, t: f64, window_h: f64) -> Tensor {
    weights.map(|w| std_normal_cdf((w.abs() - t) / window_h))
}

/// Gradient reaching `W` through `M ⊙ W`: pruned entries get none.
pub fn grad_weights_through_mask(upstream: &Tensor, mask: &Tensor) -> Result<Tensor> {
    upstream.zip_map(mask, |g, m| g * m)
}

/// Forward pass with every sparsifiable weight replaced by `M ⊙ W`. Biases
/// are never masked.
pub fn masked_forward(net: &Network, x: &Tensor, masks: &[MaskSpec]) -> Result<Tensor> {
    let mut weights: Vec<Tensor> = net.layers().iter().map(|l| l.weight.clone()).collect();
    for spec in masks {
        let w = weights.get_mut(spec.layer).ok_or_else(|| {
            Error::Contract(format!("mask refers to missing layer {}", spec.layer))
        })?;
        if w.shape() != spec.mask.shape() {
            return Err(Error::Contract(format!(
                "mask shape {:?} does not match weight shape {:?} of layer {}",
                spec.mask.shape(),
                w.shape(),
                spec.layer
            )));
        }
        *w = apply_mask(w, &spec.mask)?;
    }
    net.forward_with(x, &weights)
}
