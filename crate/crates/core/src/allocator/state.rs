use crate::error::{Error, Result};
use crate::kde::{empirical_sparsity, spread, KdeConfig, KdeModel};
use crate::losses::GlobalSparsityState;
use crate::masking::grad_mask_wrt_t;
use crate::tensor::Tensor;

/// Bisection tolerance on the bridge when placing thresholds.
pub const INIT_TOLERANCE: f64 = 1e-6;

/// Threshold, bridge and rate of one sparsifiable layer. `rate` is always
/// the bridge evaluated at `threshold` plus `offset`; use
/// [`LayerState::set_threshold`] to move either.
///
/// `offset` is the hard-count residual `empirical(t) − bridge(t)` measured
/// at the last refit (zero when debiasing is off). Reconstruction pushes
/// some weights just past the threshold where they freeze, and a kernel
/// much wider than that shell counts only part of it as pruned.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub name: String,
    /// Element count `N_l`.
    pub count: usize,
    /// Weight standard deviation, the unit of the learned threshold.
    pub scale: f64,
    pub learnable: bool,
    kde: KdeModel,
    threshold: f64,
    rate: f64,
    offset: f64,
}

impl LayerState {
    pub fn new(name: &str, weights: &Tensor, kde: &KdeConfig, seed: u64, learnable: bool) -> Result<Self> {
        let model = KdeModel::fit(weights.data(), kde, seed)?;
        Ok(Self {
            name: name.to_string(),
            count: weights.len(),
            scale: spread(weights.data()),
            learnable,
            kde: model,
            threshold: 0.0,
            rate: 0.0,
            offset: 0.0,
        })
    }

    pub fn kde(&self) -> &KdeModel {
        &self.kde
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Upper clamp for the threshold.
    pub fn ceiling(&self) -> f64 {
        self.kde.threshold_ceiling()
    }

    /// Clamps `t` into `[0, ceiling]`, stores it and recomputes the rate.
    pub fn set_threshold(&mut self, t: f64) -> Result<()> {
        if t.is_nan() {
            return Err(Error::Numeric(format!("threshold of layer {} became NaN", self.name)));
        }
        self.threshold = t.clamp(0.0, self.ceiling());
        self.rate = (self.kde.rate(self.threshold)? + self.offset).clamp(0.0, 1.0);
        Ok(())
    }

    /// Refits the density to new weights, keeping the threshold. With
    /// `debias`, re-measures the offset against the hard count.
    pub fn refit(&mut self, weights: &Tensor, kde: &KdeConfig, seed: u64, debias: bool) -> Result<()> {
        self.kde = KdeModel::fit(weights.data(), kde, seed)?;
        self.scale = spread(weights.data());
        self.offset = if debias {
            let t = self.threshold.clamp(0.0, self.ceiling());
            empirical_sparsity(weights.data(), t) - self.kde.rate(t)?
        } else {
            0.0
        };
        self.set_threshold(self.threshold)
    }
}

/// Places each threshold where the bridge gives the requested rate.
pub fn init_thresholds(layers: &mut [LayerState], r_init: &[f64]) -> Result<()> {
    if layers.len() != r_init.len() {
        return Err(Error::Contract(format!("{} rates for {} layers", r_init.len(), layers.len())));
    }
    for (layer, &r) in layers.iter_mut().zip(r_init) {
        let t = layer.kde.invert(r, INIT_TOLERANCE)?;
        layer.set_threshold(t)?;
    }
    Ok(())
}

/// `∂L/∂t_l`: the reconstruction part through the surrogate mask
/// derivative (window = the layer's bandwidth), plus `λ_c ∂L_c/∂r_l · dr/dt`.
pub fn threshold_grad(
    layer: &LayerState,
    index: usize,
    weights: &Tensor,
    dlrec_dm: &Tensor,
    state: &GlobalSparsityState,
    lambda_c: f64,
) -> Result<f64> {
    let dm_dt = grad_mask_wrt_t(weights, layer.threshold, layer.kde.bandwidth())?;
    dlrec_dm.expect_same_shape(&dm_dt)?;
    let rec: f64 = dlrec_dm.data().iter().zip(dm_dt.data()).map(|(a, b)| a * b).sum();
    let control = if lambda_c == 0.0 {
        0.0
    } else {
        lambda_c * state.control_grad(index) * layer.kde.rate_derivative(layer.threshold)
    };
    Ok(rec + control)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::{Bandwidth, SampleStrategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian(n: usize, sd: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sd).unwrap();
        Tensor::vector((0..n).map(|_| d.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn zero_rate_gives_zero_threshold() {
        let w = gaussian(1000, 0.1, 0);
        let mut l = vec![LayerState::new("a", &w, &KdeConfig::default(), 0, true).unwrap()];
        init_thresholds(&mut l, &[0.0]).unwrap();
        assert_eq!(l[0].threshold(), 0.0);
        assert_eq!(l[0].rate(), 0.0);
        assert!(init_thresholds(&mut l, &[1.0]).is_err());
    }

    #[test]
    fn gaussian_one_sigma_and_empirical_match() {
        let sd = 0.05;
        let w = gaussian(10_000, sd, 1);
        let cfg = KdeConfig::default();
        let mut l = vec![LayerState::new("a", &w, &cfg, 0, true).unwrap()];
        init_thresholds(&mut l, &[0.6827]).unwrap();
        assert!((l[0].threshold() / sd - 1.0).abs() < 0.03, "{}", l[0].threshold() / sd);
        assert!((l[0].rate() - 0.6827).abs() <= 1e-6);
        for r in [0.3, 0.5, 0.7, 0.9] {
            init_thresholds(&mut l, &[r]).unwrap();
            assert!((empirical_sparsity(w.data(), l[0].threshold()) - r).abs() <= 0.02);
        }
        // the same holds with the wide random-sample estimator
        let wide = KdeConfig { bandwidth: Bandwidth::Relative(0.5), strategy: SampleStrategy::Random, ..cfg };
        let mut l = vec![LayerState::new("a", &w, &wide, 3, true).unwrap()];
        init_thresholds(&mut l, &[0.5]).unwrap();
        assert!((l[0].rate() - 0.5).abs() <= 1e-6);
    }

    #[test]
    fn threshold_is_clamped_and_rate_tracks_it() {
        let w = gaussian(500, 1.0, 2);
        let mut l = LayerState::new("a", &w, &KdeConfig::default(), 0, true).unwrap();
        l.set_threshold(-3.0).unwrap();
        assert_eq!(l.threshold(), 0.0);
        l.set_threshold(1e9).unwrap();
        assert_eq!(l.threshold(), l.ceiling());
        assert!(l.rate() > 1.0 - 1e-12);
        l.set_threshold(0.8).unwrap();
        assert_eq!(l.rate(), l.kde().rate(0.8).unwrap());
        assert!(l.set_threshold(f64::NAN).is_err());
    }

    #[test]
    fn debiased_refit_matches_the_hard_count() {
        // a shell of weights just below t that the kernel half-counts
        let mut w = gaussian(2000, 1.0, 4).into_data();
        w.extend(std::iter::repeat_n(0.999, 200));
        let w = Tensor::vector(w).unwrap();
        let cfg = KdeConfig::default();
        let mut l = LayerState::new("a", &w, &cfg, 0, true).unwrap();
        l.set_threshold(1.0).unwrap();
        let hard = empirical_sparsity(w.data(), 1.0);
        assert!((l.rate() - hard).abs() > 0.01);
        l.refit(&w, &cfg, 0, true).unwrap();
        assert!((l.rate() - hard).abs() < 1e-12);
        assert_eq!(l.rate(), l.kde().rate(1.0).unwrap() + l.offset());
        l.refit(&w, &cfg, 0, false).unwrap();
        assert_eq!(l.offset(), 0.0);
    }

    #[test]
    fn gradient_examples() {
        let w = gaussian(400, 1.0, 3);
        let mut l = LayerState::new("a", &w, &KdeConfig::default(), 0, true).unwrap();
        l.set_threshold(0.5).unwrap();
        let zero = Tensor::zeros(&[400]);
        let state = GlobalSparsityState::new(vec![l.rate()], vec![400], 0.9).unwrap();
        assert_eq!(threshold_grad(&l, 0, &w, &zero, &state, 0.0).unwrap(), 0.0);
        // below target: the control term is negative so descent raises t
        let g = threshold_grad(&l, 0, &w, &zero, &state, 1.0).unwrap();
        assert!(g < 0.0);
        assert!((g + l.kde().rate_derivative(0.5)).abs() < 1e-12);
    }
}
