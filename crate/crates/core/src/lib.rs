//! Post-training sparsity calibration.
//!
//! Given a trained dense network and a small unlabeled calibration set, this
//! crate learns one magnitude threshold per layer so that the network's
//! global sparsity lands on a requested target while the sparse network's
//! outputs are reconstructed toward the dense ones. The non-differentiable
//! map from threshold to sparsity rate is bridged by a kernel density
//! estimate of each layer's weights, whose closed-form CDF gives the rate and
//! whose density gives the derivative.
//!
//! Module map:
//! - [`autodiff`]: a small reverse-mode tape over dense `f64` tensors.
//! - [`kde`]: the density estimate, the threshold→rate bridge and its derivative.
//! - [`masking`]: hard masks and the surrogate mask gradients.
//! - [`losses`]: control loss, KL reconstruction loss and their gradients.
//! - [`allocator`]: the calibration loop and its plan/report types.
//! - [`baselines`]: uniform, pooled L2-normalized and ERK allocations.
//! - [`zoo`]: toy networks, dense training, checkpoints and IDX datasets.
//! - [`sparse`]: CSR storage, the sparse inference runtime and its benchmark.
//! - [`report`]: structured report and allocation table emission.

pub mod allocator;
pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod kde;
pub mod losses;
pub mod masking;
pub mod optim;
pub mod report;
pub mod sparse;
pub mod tensor;
pub mod zoo;

pub use allocator::{
    calibrate, AllocatorKind, CalibrationPlan, CalibrationReport, LayerAllocation, LayerState,
    LrSchedule, StepRecord,
};
pub use error::{Error, Result};
pub use kde::{Bandwidth, KdeConfig, KdeModel, SampleStrategy};
pub use sparse::{bench, BenchConfig, BenchResult, CsrMatrix, SparseModel};
pub use tensor::Tensor;
pub use zoo::{evaluate, Architecture, Checkpoint, Classifier, Dataset, InputShape, ModelSpec, Network};
