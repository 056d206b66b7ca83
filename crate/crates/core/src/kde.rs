//! Gaussian kernel density estimate of a layer's weights and the bridge from
//! a magnitude threshold `t` to the sparsity rate it induces.
//!
//! With samples `w_1..w_n` and bandwidth `h`,
//!
//! ```text
//! p(w)  = 1/(n h) Σ φ((w − w_i)/h)
//! r(t)  = ∫_{−t}^{t} p = 1/n Σ [Φ((t − w_i)/h) − Φ((−t − w_i)/h)]
//! r'(t) = p(t) + p(−t)
//! ```
//!
//! where `φ`/`Φ` are the standard normal density and distribution function.
//! `r` is evaluated through `erfc`, so `r'` is its exact derivative.

use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Sample count used when nothing else is configured.
pub const DEFAULT_SAMPLES: usize = 100;

/// Bandwidth, relative to the layer's weight standard deviation, used when
/// nothing else is configured.
pub const DEFAULT_BANDWIDTH_FACTOR: f64 = 0.05;

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Bandwidth {
    /// Multiple of the layer's weight standard deviation.
    Relative(f64),
    /// Raw bandwidth in weight units.
    Absolute(f64),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Relative(DEFAULT_BANDWIDTH_FACTOR)
    }
}

/// How the `n` kernel centres are picked from a layer's weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleStrategy {
    /// One weight per equal-count stratum of the magnitude ranking (the
    /// stratum's median). The sample magnitudes then reproduce the layer's
    /// magnitude quantiles, which keeps the bridge close to the hard count.
    #[default]
    Quantile,
    /// Uniformly at random without replacement.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    pub samples: usize,
    pub bandwidth: Bandwidth,
    pub strategy: SampleStrategy,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            bandwidth: Bandwidth::default(),
            strategy: SampleStrategy::default(),
        }
    }
}

/// Threshold, rate and slope of the bridge at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BridgeEval {
    pub t: f64,
    pub r: f64,
    pub dr_dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdeModel {
    samples: Vec<f64>,
    bandwidth: f64,
}

impl KdeModel {
    pub fn new(samples: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("KDE needs at least one sample".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Contract(format!("KDE bandwidth must be positive, got {bandwidth}")));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite KDE sample".into()));
        }
        Ok(Self { samples, bandwidth })
    }

    /// Fits the estimate to a flat weight slice.
    ///
    /// Layers with fewer than `n` weights are sampled with replacement.
    pub fn fit(weights: &[f64], cfg: &KdeConfig, seed: u64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Contract("cannot fit a KDE to an empty weight tensor".into()));
        }
        if cfg.samples == 0 {
            return Err(Error::Contract("KDE sample count must be at least 1".into()));
        }
        let n = cfg.samples;
        let samples = match cfg.strategy {
            SampleStrategy::Quantile => {
                let mut order: Vec<usize> = (0..weights.len()).collect();
                order.sort_by(|&a, &b| weights[a].abs().total_cmp(&weights[b].abs()).then(a.cmp(&b)));
                let len = weights.len() as f64;
                (0..n)
                    .map(|k| {
                        let rank = (((k as f64 + 0.5) * len / n as f64) as usize).min(weights.len() - 1);
                        weights[order[rank]]
                    })
                    .collect()
            }
            SampleStrategy::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                if weights.len() >= n {
                    index::sample(&mut rng, weights.len(), n).iter().map(|i| weights[i]).collect()
                } else {
                    (0..n).map(|_| weights[rng.random_range(0..weights.len())]).collect()
                }
            }
        };
        let h = match cfg.bandwidth {
            Bandwidth::Absolute(h) => h,
            Bandwidth::Relative(f) => f * spread(weights),
        };
        Self::new(samples, h)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn pdf(&self, w: f64) -> f64 {
        let h = self.bandwidth;
        let total: f64 = self.samples.iter().map(|&s| std_normal_pdf((w - s) / h)).sum();
        total / (self.samples.len() as f64 * h)
    }

    /// Probability mass of `[−t, t]`: the sparsity rate a threshold `t` induces.
    pub fn rate(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Contract(format!("threshold must be non-negative, got {t}")));
        }
        let h = self.bandwidth;
        let total: f64 = self
            .samples
            .iter()
            .map(|&s| std_normal_cdf((t - s) / h) - std_normal_cdf((-t - s) / h))
            .sum();
        Ok((total / self.samples.len() as f64).clamp(0.0, 1.0))
    }

    /// `dr/dt = p(t) + p(−t)`.
    pub fn rate_derivative(&self, t: f64) -> f64 {
        self.pdf(t) + self.pdf(-t)
    }

    pub fn eval(&self, t: f64) -> Result<BridgeEval> {
        Ok(BridgeEval { t, r: self.rate(t)?, dr_dt: self.rate_derivative(t) })
    }

    /// Upper end of the threshold bracket: past it the rate is 1 to within rounding.
    pub fn threshold_ceiling(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs())) + 10.0 * self.bandwidth
    }

    /// Smallest threshold whose rate is within `tol` of `target`, by bisection
    /// on `[0, threshold_ceiling]`.
    pub fn invert(&self, target: f64, tol: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&target) {
            return Err(Error::Contract(format!(
                "target rate must lie in [0, 1) to bracket a threshold, got {target}"
            )));
        }
        if target == 0.0 {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0, self.threshold_ceiling());
        if self.rate(hi)? < target {
            return Err(Error::Contract(format!("rate {target} is not bracketed")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let r = self.rate(mid)?;
            if (r - target).abs() <= tol && hi - lo < 1e-12 * (1.0 + hi) {
                return Ok(mid);
            }
            if r < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        if (self.rate(t)? - target).abs() <= tol {
            Ok(t)
        } else {
            Err(Error::Numeric(format!("bisection for rate {target} did not converge")))
        }
    }
}

/// Standard deviation of the weights, falling back to their mean magnitude
/// (or 1) for degenerate constant tensors so the bandwidth stays positive.
pub fn spread(weights: &[f64]) -> f64 {
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 0.0 {
        sd
    } else if mean != 0.0 {
        mean.abs()
    } else {
        1.0
    }
}

/// Fraction of weights a hard threshold prunes: `|w| ≤ t` (ties pruned).
pub fn empirical_sparsity(weights: &[f64], t: f64) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    let pruned = weights.iter().filter(|w| w.abs() - t <= 0.0).count();
    pruned as f64 / weights.len() as f64
}
