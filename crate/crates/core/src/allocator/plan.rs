use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{Bandwidth, KdeConfig};

/// Where the per-layer rates come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocatorKind {
    /// Thresholds initialized from ERK, then learned.
    #[default]
    Fcpts,
    Uniform,
    Erk,
    /// Pooled cut over L2-normalized magnitudes.
    L2Norm,
}

impl AllocatorKind {
    /// Whether thresholds are learned when the plan does not say.
    pub fn learns_by_default(self) -> bool {
        self == AllocatorKind::Fcpts
    }
}

impl fmt::Display for AllocatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AllocatorKind::Fcpts => "fcpts",
            AllocatorKind::Uniform => "uniform",
            AllocatorKind::Erk => "erk",
            AllocatorKind::L2Norm => "l2norm",
        })
    }
}

impl FromStr for AllocatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcpts" => Ok(AllocatorKind::Fcpts),
            "uniform" => Ok(AllocatorKind::Uniform),
            "erk" => Ok(AllocatorKind::Erk),
            "l2norm" | "pot-l2norm" | "pot_l2norm" => Ok(AllocatorKind::L2Norm),
            _ => Err(Error::Config(format!("unknown allocator `{s}`"))),
        }
    }
}

/// Learning-rate schedule over the step budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationPlan {
    /// Requested global sparsity `r_0`.
    pub target: f64,
    /// Passes over the calibration set.
    pub epochs: usize,
    /// Explicit step budget; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    /// Threshold learning rate, in units of the layer's weight std.
    pub lr_thresholds: f64,
    pub lr_weights: f64,
    pub schedule: LrSchedule,
    pub kde: KdeConfig,
    /// Shift each layer's bridge by its hard-count residual at every refit.
    pub debias_bridge: bool,
    pub lambda_c: f64,
    pub seed: u64,
    /// `None` follows the allocator's default.
    pub learn_rates: Option<bool>,
    /// Update unmasked weights and biases toward the dense outputs.
    pub reconstruct: bool,
    pub allocator: AllocatorKind,
    /// Rescale all thresholds by one common factor at the end so the
    /// achieved rate is within 0.001 of the target.
    pub project_to_target: bool,
    /// Calibration samples taken from the head of the calibration set.
    pub calib_size: usize,
}

impl Default for CalibrationPlan {
    fn default() -> Self {
        Self {
            target: 0.7,
            epochs: 8,
            steps: None,
            batch_size: 64,
            lr_thresholds: 1e-2,
            lr_weights: 1e-4,
            schedule: LrSchedule::default(),
            kde: KdeConfig::default(),
            debias_bridge: true,
            lambda_c: 10.0,
            seed: 0,
            learn_rates: None,
            reconstruct: true,
            allocator: AllocatorKind::default(),
            project_to_target: false,
            calib_size: 1024,
        }
    }
}

impl CalibrationPlan {
    pub fn with_target(target: f64) -> Self {
        Self { target, ..Self::default() }
    }

    pub fn learns_rates(&self) -> bool {
        self.learn_rates.unwrap_or_else(|| self.allocator.learns_by_default())
    }

    /// Steps to run for a calibration set of `samples` items.
    pub fn step_budget(&self, samples: usize) -> usize {
        self.steps.unwrap_or_else(|| self.epochs * samples.div_ceil(self.batch_size.max(1)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.target > 0.0 && self.target < 1.0) {
            return bad(format!("target sparsity must lie in (0, 1), got {}", self.target));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.calib_size == 0 {
            return bad("calibration size must be positive".into());
        }
        if !(self.lr_thresholds > 0.0 && self.lr_weights > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return bad(format!("lambda_c must be a non-negative number, got {}", self.lambda_c));
        }
        if self.kde.samples == 0 {
            return bad("KDE sample count must be positive".into());
        }
        let h = match self.kde.bandwidth {
            Bandwidth::Relative(h) | Bandwidth::Absolute(h) => h,
        };
        if !(h > 0.0 && h.is_finite()) {
            return bad(format!("KDE bandwidth must be positive, got {h}"));
        }
        Ok(())
    }
}
