//! Comparison allocations: uniform, pooled L2-normalized magnitude, and ERK.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::weighted_mean;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationMethod {
    Uniform,
    L2Norm,
    Erk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub rates: Vec<f64>,
    pub method: AllocationMethod,
}

impl AllocationResult {
    /// Element-weighted mean rate for layers with these element counts.
    pub fn global_rate(&self, counts: &[usize]) -> f64 {
        weighted_mean(&self.rates, counts)
    }
}

fn check_rate(r0: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r0) {
        return Err(Error::Contract(format!("target rate must lie in [0, 1), got {r0}")));
    }
    Ok(())
}

/// Same rate everywhere.
pub fn uniform_allocation(weights: &[Tensor], r0: f64) -> Result<AllocationResult> {
    check_rate(r0)?;
    Ok(AllocationResult { rates: vec![r0; weights.len()], method: AllocationMethod::Uniform })
}

/// Pools `|w| / ‖W_l‖₂` across all layers and prunes the lowest
/// `round(r0 · Σ N)` scores; each layer's rate is its share of the cut.
pub fn l2norm_global_allocation(weights: &[Tensor], r0: f64) -> Result<AllocationResult> {
    check_rate(r0)?;
    let mut scores: Vec<(f64, usize)> = Vec::new();
    for (l, w) in weights.iter().enumerate() {
        let norm = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm = if norm > 0.0 { norm } else { 1.0 };
        scores.extend(w.data().iter().map(|v| (v.abs() / norm, l)));
    }
    let total = scores.len();
    let cut = ((r0 * total as f64).round() as usize).min(total);
    // stable: equal scores keep layer order
    scores.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pruned = vec![0usize; weights.len()];
    for &(_, l) in &scores[..cut] {
        pruned[l] += 1;
    }
    let rates = pruned.iter().zip(weights).map(|(&p, w)| p as f64 / w.len() as f64).collect();
    Ok(AllocationResult { rates, method: AllocationMethod::L2Norm })
}

/// ERK raw density factor: sum of extents over their product.
pub fn erk_factor(shape: &[usize]) -> f64 {
    shape.iter().sum::<usize>() as f64 / shape.iter().product::<usize>() as f64
}

/// Erdős–Rényi-kernel densities, `density_l = ε · erk_factor_l`, with ε
/// chosen so the element-weighted density is `1 − r0`. Layers whose density
/// would exceed 1 are made dense and ε is re-solved over the rest.
pub fn erk_allocation(weights: &[Tensor], r0: f64) -> Result<AllocationResult> {
    if !(r0 > 0.0 && r0 < 1.0) {
        return Err(Error::Contract(format!("ERK needs a target rate in (0, 1), got {r0}")));
    }
    let counts: Vec<f64> = weights.iter().map(|w| w.len() as f64).collect();
    let factors: Vec<f64> = weights.iter().map(|w| erk_factor(w.shape())).collect();
    let mut dense = vec![false; weights.len()];
    let eps = loop {
        let mut budget = 0.0;
        let mut divisor = 0.0;
        for l in 0..weights.len() {
            if dense[l] {
                budget -= r0 * counts[l];
            } else {
                budget += (1.0 - r0) * counts[l];
                divisor += factors[l] * counts[l];
            }
        }
        if divisor == 0.0 {
            return Err(Error::Contract(format!("ERK target {r0} needs density above 1 in every layer")));
        }
        let eps = budget / divisor;
        let mut changed = false;
        for l in 0..weights.len() {
            if !dense[l] && eps * factors[l] > 1.0 {
                dense[l] = true;
                changed = true;
            }
        }
        if !changed {
            break eps;
        }
    };
    let rates = (0..weights.len())
        .map(|l| if dense[l] { 0.0 } else { (1.0 - eps * factors[l]).clamp(0.0, 1.0) })
        .collect();
    Ok(AllocationResult { rates, method: AllocationMethod::Erk })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn counts(ws: &[Tensor]) -> Vec<usize> {
        ws.iter().map(|w| w.len()).collect()
    }

    #[test]
    fn uniform_examples() {
        let ws = vec![layer(&[3, 3], 0), layer(&[4, 2], 1), layer(&[5], 2)];
        assert_eq!(uniform_allocation(&ws, 0.5).unwrap().rates, vec![0.5; 3]);
        assert_eq!(uniform_allocation(&ws, 0.0).unwrap().rates, vec![0.0; 3]);
        assert!(uniform_allocation(&ws, 1.0).is_err());
    }

    #[test]
    fn l2norm_single_layer_is_uniform() {
        let ws = vec![layer(&[20, 10], 3)];
        let a = l2norm_global_allocation(&ws, 0.37).unwrap();
        assert!((a.rates[0] - 0.37).abs() <= 0.5 / 200.0);
    }

    #[test]
    fn l2norm_identical_distributions_share_the_rate() {
        // the second layer is the first scaled by 7: identical normalized scores
        let a = layer(&[50, 40], 4);
        let b = Tensor::new(vec![50, 40], a.data().iter().map(|v| v * 7.0).collect()).unwrap();
        let ws = vec![a, b];
        let res = l2norm_global_allocation(&ws, 0.6).unwrap();
        for r in &res.rates {
            assert!((r - 0.6).abs() <= 1.0 / 2000.0, "{r}");
        }
    }

    #[test]
    fn l2norm_global_rate_within_one_element() {
        let ws = vec![layer(&[31, 7], 5), layer(&[13, 11], 6), layer(&[3, 3, 2, 2], 7)];
        let total: usize = counts(&ws).iter().sum();
        for r0 in [0.1, 0.33, 0.5, 0.77, 0.9] {
            let res = l2norm_global_allocation(&ws, r0).unwrap();
            assert!((res.global_rate(&counts(&ws)) - r0).abs() <= 1.0 / total as f64);
        }
    }

    #[test]
    fn erk_identical_shapes_is_uniform() {
        let ws = vec![layer(&[16, 16], 0), layer(&[16, 16], 1)];
        let res = erk_allocation(&ws, 0.7).unwrap();
        for r in res.rates {
            assert!((r - 0.7).abs() < 1e-12);
        }
    }

    /// Independent brute force: scan ε on a fine grid then bisect, capping
    /// densities at 1, and check the solver lands on the same rates.
    fn brute_force_erk(shapes: &[&[usize]], r0: f64) -> Vec<f64> {
        let n: Vec<f64> = shapes.iter().map(|s| s.iter().product::<usize>() as f64).collect();
        let f: Vec<f64> = shapes.iter().map(|s| erk_factor(s)).collect();
        let total: f64 = n.iter().sum();
        let density = |eps: f64| -> f64 {
            f.iter().zip(&n).map(|(fi, ni)| (eps * fi).min(1.0) * ni).sum::<f64>() / total
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        while density(hi) < 1.0 - r0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if density(mid) < 1.0 - r0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        f.iter().map(|fi| 1.0 - (lo * fi).min(1.0)).collect()
    }

    #[test]
    fn erk_two_dense_layers_matches_brute_force() {
        let ws = vec![layer(&[10, 10], 0), layer(&[100, 100], 1)];
        // raw factors 20/100 and 200/10000: 10:1
        assert!((erk_factor(&[10, 10]) / erk_factor(&[100, 100]) - 10.0).abs() < 1e-12);
        let res = erk_allocation(&ws, 0.5).unwrap();
        let oracle = brute_force_erk(&[&[10, 10], &[100, 100]], 0.5);
        for (a, b) in res.rates.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        // the small layer caps at density 1
        assert_eq!(res.rates[0], 0.0);
        assert!((res.global_rate(&counts(&ws)) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn erk_mean_and_ordering_on_mixed_layers() {
        let shapes: [&[usize]; 4] = [&[8, 1, 3, 3], &[16, 8, 3, 3], &[784, 64], &[64, 10]];
        let ws: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| layer(s, i as u64)).collect();
        for r0 in [0.5, 0.7, 0.8, 0.9, 0.95] {
            let res = erk_allocation(&ws, r0).unwrap();
            assert!((res.global_rate(&counts(&ws)) - r0).abs() < 1e-6);
            let oracle = brute_force_erk(&shapes, r0);
            for (a, b) in res.rates.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9);
            }
            // larger factor ⇒ no higher sparsity
            for i in 0..4 {
                for j in 0..4 {
                    if erk_factor(shapes[i]) > erk_factor(shapes[j]) {
                        assert!(res.rates[i] <= res.rates[j]);
                    }
                }
            }
        }
        assert!(erk_allocation(&ws, 0.0).is_err());
    }
}
