//! Calibration objective: the global-rate control loss, the KL
//! reconstruction loss against the dense teacher, and their combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-layer rates and element counts together with the global target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalSparsityState {
    rates: Vec<f64>,
    counts: Vec<usize>,
    target: f64,
}

impl GlobalSparsityState {
    pub fn new(rates: Vec<f64>, counts: Vec<usize>, target: f64) -> Result<Self> {
        if rates.len() != counts.len() {
            return Err(Error::Contract(format!(
                "{} rates for {} layers",
                rates.len(),
                counts.len()
            )));
        }
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::Contract("every layer needs at least one weight".into()));
        }
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Contract("rates must lie in [0, 1]".into()));
        }
        Ok(Self { rates, counts, target })
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn total_count(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `Σ r_i N_i / Σ N_i`.
    pub fn weighted_mean(&self) -> f64 {
        weighted_mean(&self.rates, &self.counts)
    }

    /// `|Σ r_i N_i / Σ N_i − r_0|`.
    pub fn control_loss(&self) -> f64 {
        (self.weighted_mean() - self.target).abs()
    }

    /// `∂L_c/∂r_l`: `±N_l / Σ N_i` by the side of the target the mean is on,
    /// and 0 exactly at the target.
    pub fn control_grad(&self, layer: usize) -> f64 {
        let share = self.counts[layer] as f64 / self.total_count() as f64;
        let mean = self.weighted_mean();
        if mean > self.target {
            share
        } else if mean < self.target {
            -share
        } else {
            0.0
        }
    }
}

pub fn weighted_mean(rates: &[f64], counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let acc: f64 = rates.iter().zip(counts).map(|(r, &n)| r * n as f64).sum();
    acc / total as f64
}

fn check_logits(dense: &Tensor, sparse: &Tensor) -> Result<(usize, usize)> {
    dense.expect_same_shape(sparse)?;
    let (b, c) = dense.dims2()?;
    if !dense.is_finite() || !sparse.is_finite() {
        return Err(Error::Numeric("non-finite logits in reconstruction loss".into()));
    }
    Ok((b, c))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Batch mean of `KL(softmax(dense) ‖ softmax(sparse))`.
pub fn reconstruction_loss(dense: &Tensor, sparse: &Tensor) -> Result<f64> {
    let (b, c) = check_logits(dense, sparse)?;
    let mut total = 0.0;
    for (dr, sr) in dense.data().chunks(c).zip(sparse.data().chunks(c)) {
        let (lp, lq) = (log_softmax(dr), log_softmax(sr));
        total += lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
    }
    // clamp rounding noise on identical rows
    Ok((total / b as f64).max(0.0))
}

/// Graph form of [`reconstruction_loss`]. The dense logits enter as a
/// constant, so gradients reach only the sparse branch.
pub fn reconstruction_loss_graph(g: &mut Graph, dense: &Tensor, sparse: Var) -> Result<Var> {
    let (b, c) = check_logits(dense, g.value(sparse))?;
    let mut neg_p = Vec::with_capacity(b * c);
    let mut entropy_term = 0.0;
    for row in dense.data().chunks(c) {
        let lp = log_softmax(row);
        for l in lp {
            let p = l.exp();
            neg_p.push(-p / b as f64);
            entropy_term += p * l;
        }
    }
    let q = g.softmax(sparse);
    let log_q = g.log(q).map_err(|e| Error::Numeric(format!("reconstruction loss: {e}")))?;
    let weights = g.constant(Tensor::from_parts(vec![b, c], neg_p));
    let cross = g.mul(log_q, weights)?;
    let cross = g.sum(cross);
    let offset = g.constant(Tensor::scalar(entropy_term / b as f64));
    g.add(cross, offset)
}

/// `L_rec + λ_c · L_c`.
pub fn total_loss(reconstruction: f64, control: f64, lambda_c: f64) -> f64 {
    reconstruction + lambda_c * control
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn control_loss_examples() {
        let s = GlobalSparsityState::new(vec![0.6, 0.6], vec![100, 300], 0.6).unwrap();
        assert!(s.control_loss().abs() < 1e-15);
        let s = GlobalSparsityState::new(vec![0.5, 0.7], vec![100, 300], 0.6).unwrap();
        assert!((s.control_loss() - 0.05).abs() < 1e-12);
        let s = GlobalSparsityState::new(vec![0.3], vec![7], 0.8).unwrap();
        assert!((s.control_loss() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn control_grad_examples() {
        let s = GlobalSparsityState::new(vec![0.5, 0.7], vec![100, 300], 0.6).unwrap();
        assert_eq!(s.control_grad(1), 0.75);
        assert_eq!(s.control_grad(0), 0.25);
        let s = GlobalSparsityState::new(vec![0.5, 0.5], vec![100, 300], 0.5).unwrap();
        assert_eq!(s.control_grad(0), 0.0);
        let s = GlobalSparsityState::new(vec![0.1, 0.2], vec![100, 300], 0.5).unwrap();
        assert_eq!(s.control_grad(1), -0.75);
    }

    #[test]
    fn state_validation() {
        assert!(GlobalSparsityState::new(vec![0.5], vec![1, 2], 0.5).is_err());
        assert!(GlobalSparsityState::new(vec![0.5], vec![0], 0.5).is_err());
        assert!(GlobalSparsityState::new(vec![1.5], vec![3], 0.5).is_err());
    }

    #[test]
    fn control_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let k = rng.random_range(1..6);
            let rates: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..0.95)).collect();
            let counts: Vec<usize> = (0..k).map(|_| rng.random_range(1..1000)).collect();
            let target = rng.random_range(0.05..0.95);
            let s = GlobalSparsityState::new(rates.clone(), counts.clone(), target).unwrap();
            if (s.weighted_mean() - target).abs() < 1e-6 {
                continue;
            }
            let l = rng.random_range(0..k);
            let step = 1e-8;
            let shifted = |d: f64| {
                let mut r = rates.clone();
                r[l] += d;
                GlobalSparsityState::new(r, counts.clone(), target).unwrap().control_loss()
            };
            let fd = (shifted(step) - shifted(-step)) / (2.0 * step);
            assert!((fd - s.control_grad(l)).abs() <= 1e-7, "{fd} vs {}", s.control_grad(l));
        }
    }

    #[test]
    fn kl_examples() {
        let a = Tensor::matrix(2, 3, vec![0.1, 2.0, -1.0, 3.0, 0.0, 0.5]).unwrap();
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let dense = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let sparse = Tensor::matrix(1, 2, vec![2f64.ln(), 0.0]).unwrap();
        let expected = 0.5 * 0.75f64.ln() + 0.5 * 1.5f64.ln();
        assert!((reconstruction_loss(&dense, &sparse).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.058_891).abs() < 1e-5);
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        let a = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        assert!(reconstruction_loss(&a, &b).is_err());
    }

    #[test]
    fn graph_kl_matches_direct_and_only_sparse_gets_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let dense = Tensor::matrix(3, 4, d).unwrap();
        let sparse = Tensor::matrix(3, 4, s).unwrap();
        let mut g = Graph::new();
        let sv = g.param(sparse.clone());
        let loss = reconstruction_loss_graph(&mut g, &dense, sv).unwrap();
        let direct = reconstruction_loss(&dense, &sparse).unwrap();
        assert!((g.value(loss).item().unwrap() - direct).abs() < 1e-12);
        g.backward(loss).unwrap();
        // ∂KL/∂z_sparse = (q − p) / B
        let grad = g.grad(sv).unwrap();
        for (row, (dr, sr)) in dense.data().chunks(4).zip(sparse.data().chunks(4)).enumerate() {
            let (lp, lq) = (log_softmax(dr), log_softmax(sr));
            for j in 0..4 {
                let expect = (lq[j].exp() - lp[j].exp()) / 3.0;
                assert!((grad.data()[row * 4 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(0.3, 0.05, 1.0) - 0.35).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 3.0), 0.0);
        assert!((total_loss(0.3, 0.05, 2.0) - 0.4).abs() < 1e-15);
    }
}
