use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::plan::{AllocatorKind, CalibrationPlan};
use crate::allocator::state::{init_thresholds, threshold_grad, LayerState};
use crate::autodiff::{Graph, Var};
use crate::baselines::{erk_allocation, l2norm_global_allocation, uniform_allocation};
use crate::error::{Error, Result};
use crate::kde::empirical_sparsity;
use crate::losses::{reconstruction_loss_graph, total_loss, weighted_mean, GlobalSparsityState};
use crate::masking::{apply_mask, gen_mask};
use crate::optim::Adam;
use crate::sparse::SparseModel;
use crate::tensor::Tensor;
use crate::zoo::{evaluate, Dataset, Network, Normalization};

/// Projection stops once the empirical rate is this close to the target.
pub const PROJECTION_TOLERANCE: f64 = 1e-3;

/// A loss above this multiple of the first step's loss counts as divergence.
const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_rec: f64,
    pub l_c: f64,
    /// Element-weighted bridge rate entering the control loss.
    pub global_rate: f64,
    /// Element-weighted rate of the hard masks used in this step.
    pub empirical_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAllocation {
    pub index: usize,
    pub name: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub threshold: f64,
    /// Fraction of the layer's weights the final hard mask removes.
    pub rate: f64,
    /// Rate the initial allocation assigned to the layer.
    pub initial_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub arch: String,
    pub plan: CalibrationPlan,
    pub calibration_samples: usize,
    pub normalization: Normalization,
    pub steps: Vec<StepRecord>,
    pub allocation: Vec<LayerAllocation>,
    /// `Σ r_l N_l / Σ N_l` of the final hard masks.
    pub achieved_rate: f64,
    /// Common threshold scale applied by projection, if it ran.
    pub projection_scale: Option<f64>,
    pub accuracy_dense: Option<f64>,
    pub accuracy_sparse: Option<f64>,
    /// Kept out of the serialized report so identical runs serialize identically.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl CalibrationReport {
    /// Recomputes the achieved rate from the allocation rows.
    pub fn rate_from_allocation(&self) -> f64 {
        let rates: Vec<f64> = self.allocation.iter().map(|a| a.rate).collect();
        let counts: Vec<usize> = self.allocation.iter().map(|a| a.n).collect();
        weighted_mean(&rates, &counts)
    }
}

/// Initial per-layer rates for the plan's allocator. The learned arm starts
/// from ERK.
pub fn initial_rates(net: &Network, plan: &CalibrationPlan) -> Result<Vec<f64>> {
    let weights: Vec<Tensor> = net.layers().iter().map(|l| l.weight.clone()).collect();
    let alloc = match plan.allocator {
        AllocatorKind::Fcpts | AllocatorKind::Erk => erk_allocation(&weights, plan.target)?,
        AllocatorKind::Uniform => uniform_allocation(&weights, plan.target)?,
        AllocatorKind::L2Norm => l2norm_global_allocation(&weights, plan.target)?,
    };
    Ok(alloc.rates)
}

fn empirical_global(net: &Network, thresholds: &[f64]) -> f64 {
    let rates: Vec<f64> =
        net.layers().iter().zip(thresholds).map(|(l, &t)| empirical_sparsity(l.weight.data(), t)).collect();
    weighted_mean(&rates, &net.weight_counts())
}

/// Scales every threshold by one factor `α`, found by bisection, so the
/// empirical global rate lands within [`PROJECTION_TOLERANCE`] of `target`.
/// Returns `α` (1 when already within tolerance).
pub fn project_thresholds(net: &Network, thresholds: &mut [f64], target: f64) -> Result<f64> {
    let rate_at = |a: f64| {
        let scaled: Vec<f64> = thresholds.iter().map(|t| t * a).collect();
        empirical_global(net, &scaled)
    };
    if (rate_at(1.0) - target).abs() <= PROJECTION_TOLERANCE {
        return Ok(1.0);
    }
    if thresholds.iter().all(|&t| t == 0.0) {
        return Err(Error::Contract("cannot project all-zero thresholds".into()));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while rate_at(hi) < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Numeric("projection could not bracket the target".into()));
        }
    }
    let mut alpha = hi;
    for _ in 0..200 {
        alpha = 0.5 * (lo + hi);
        let r = rate_at(alpha);
        if (r - target).abs() <= PROJECTION_TOLERANCE {
            break;
        }
        if r < target {
            lo = alpha;
        } else {
            hi = alpha;
        }
    }
    for t in thresholds.iter_mut() {
        *t *= alpha;
    }
    Ok(alpha)
}

fn round_to_f32(net: &mut Network) {
    for l in net.layers_mut() {
        l.weight = l.weight.map(|v| v as f32 as f64);
        l.bias = l.bias.map(|v| v as f32 as f64);
    }
}

struct StepOutcome {
    l_rec: f64,
    weight_grads: Vec<Tensor>,
    bias_grads: Vec<Tensor>,
}

/// Forward and backward through `M ⊙ W` on one batch. The effective weights
/// are leaves, so their gradient `G` gives both `∂L/∂M = G ⊙ W` and
/// `∂L/∂W = G ⊙ M`.
fn reconstruction_step(net: &Network, masks: &[Tensor], x: Tensor, teacher: &Tensor) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut wv = Vec::with_capacity(masks.len());
    for (l, m) in net.layers().iter().zip(masks) {
        wv.push(g.param(apply_mask(&l.weight, m)?));
    }
    let bv: Vec<Var> = net.layers().iter().map(|l| g.param(l.bias.clone())).collect();
    let logits = net.forward_graph(&mut g, xv, &wv, &bv)?;
    let loss = reconstruction_loss_graph(&mut g, teacher, logits)?;
    let l_rec = g.value(loss).item()?;
    g.backward(loss)?;
    let grad = |v: Var| g.grad(v).cloned().expect("parameter reaches the loss");
    Ok(StepOutcome {
        l_rec,
        weight_grads: wv.iter().map(|&v| grad(v)).collect(),
        bias_grads: bv.iter().map(|&v| grad(v)).collect(),
    })
}

/// Learns per-layer thresholds (and reconstructs weights) on `calib`, then
/// compresses the result. `eval` adds dense and sparse accuracies to the report.
pub fn calibrate(
    dense: &Network,
    calib: &Dataset,
    plan: &CalibrationPlan,
    eval: Option<&Dataset>,
) -> Result<(SparseModel, CalibrationReport)> {
    let start = Instant::now();
    plan.validate()?;
    let data = calib.head(plan.calib_size);
    if data.is_empty() {
        return Err(Error::Contract("calibration set is empty".into()));
    }
    if data.input_shape() != dense.spec().input {
        return Err(Error::Contract(format!(
            "calibration images {:?} do not match model input {:?}",
            data.input_shape(),
            dense.spec().input
        )));
    }
    let norm = dense.normalization();
    let learn = plan.learns_rates();
    let mut net = dense.clone();
    let counts = net.weight_counts();
    let n_layers = counts.len();

    let r_init = initial_rates(&net, plan)?;
    let layer_seed = |epoch: usize, l: usize| plan.seed ^ ((epoch * n_layers + l) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut layers = net
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| LayerState::new(&l.name, &l.weight, &plan.kde, layer_seed(0, i), learn))
        .collect::<Result<Vec<_>>>()?;
    init_thresholds(&mut layers, &r_init)?;

    let all: Vec<usize> = (0..data.len()).collect();
    let teacher = dense.forward(&data.batch(&all, norm))?;
    let classes = teacher.shape()[1];

    let per_epoch = data.len().div_ceil(plan.batch_size);
    let budget = if learn || plan.reconstruct { plan.step_budget(data.len()) } else { 0 };
    let mut sizes = Vec::with_capacity(2 * n_layers + 1);
    sizes.push(n_layers);
    for l in net.layers() {
        sizes.push(l.weight.len());
        sizes.push(l.bias.len());
    }
    let mut adam = Adam::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order = all.clone();
    let mut steps = Vec::with_capacity(budget);
    let mut first_loss: Option<f64> = None;

    for step in 0..budget {
        let epoch = step / per_epoch;
        let pos = step % per_epoch;
        if pos == 0 {
            order.shuffle(&mut rng);
            if step > 0 {
                for (i, (state, layer)) in layers.iter_mut().zip(net.layers()).enumerate() {
                    state.refit(&layer.weight, &plan.kde, layer_seed(epoch, i), plan.debias_bridge)?;
                }
            }
        }
        let chunk = &order[pos * plan.batch_size..((pos + 1) * plan.batch_size).min(order.len())];
        let masks: Vec<Tensor> =
            net.layers().iter().zip(&layers).map(|(l, s)| gen_mask(&l.weight, s.threshold())).collect();
        let mut tb = Vec::with_capacity(chunk.len() * classes);
        for &i in chunk {
            tb.extend_from_slice(&teacher.data()[i * classes..(i + 1) * classes]);
        }
        let tb = Tensor::new(vec![chunk.len(), classes], tb)?;
        let out = reconstruction_step(&net, &masks, data.batch(chunk, norm), &tb)?;

        let state = GlobalSparsityState::new(layers.iter().map(|s| s.rate()).collect(), counts.clone(), plan.target)?;
        let l_c = state.control_loss();
        let total = total_loss(out.l_rec, l_c, plan.lambda_c);
        let initial = *first_loss.get_or_insert(total);
        if !total.is_finite() || total > DIVERGENCE_FACTOR * initial.max(1e-3) {
            return Err(Error::Divergence(format!(
                "loss {total} at step {step} (L_rec {}, L_c {l_c}, initial {initial})",
                out.l_rec
            )));
        }
        let mask_rates: Vec<f64> = masks.iter().map(|m| m.data().iter().filter(|&&v| v == 0.0).count() as f64 / m.len() as f64).collect();
        steps.push(StepRecord {
            step,
            epoch,
            l_rec: out.l_rec,
            l_c,
            global_rate: state.weighted_mean(),
            empirical_rate: weighted_mean(&mask_rates, &counts),
        });

        let lr_scale = plan.schedule.factor(step, budget);
        adam.begin_step();
        if learn {
            let mut grads = Vec::with_capacity(n_layers);
            for (i, (s, l)) in layers.iter().zip(net.layers()).enumerate() {
                let dl_dm = out.weight_grads[i].zip_map(&l.weight, |g, w| g * w)?;
                // standardized threshold u = t / σ
                grads.push(s.scale * threshold_grad(s, i, &l.weight, &dl_dm, &state, plan.lambda_c)?);
            }
            let mut u: Vec<f64> = layers.iter().map(|s| s.threshold() / s.scale).collect();
            adam.apply(0, &mut u, &grads, plan.lr_thresholds * lr_scale, None);
            for (s, ui) in layers.iter_mut().zip(u) {
                let t = ui * s.scale;
                s.set_threshold(t)?;
            }
        }
        if plan.reconstruct {
            for (i, layer) in net.layers_mut().iter_mut().enumerate() {
                let gw = out.weight_grads[i].zip_map(&masks[i], |g, m| g * m)?;
                let lr = plan.lr_weights * lr_scale;
                adam.apply(1 + 2 * i, layer.weight.data_mut(), gw.data(), lr, Some(masks[i].data()));
                adam.apply(2 + 2 * i, layer.bias.data_mut(), out.bias_grads[i].data(), lr, None);
            }
        }
    }

    round_to_f32(&mut net);
    let mut thresholds: Vec<f64> = layers.iter().map(|s| s.threshold()).collect();
    let projection_scale = if plan.project_to_target {
        Some(project_thresholds(&net, &mut thresholds, plan.target)?)
    } else {
        None
    };
    let sparse = SparseModel::from_thresholds(&net, &thresholds)?;
    let allocation = net
        .layers()
        .iter()
        .zip(sparse.layers())
        .enumerate()
        .map(|(i, (l, s))| LayerAllocation {
            index: i,
            name: l.name.clone(),
            n: l.weight.len(),
            threshold: thresholds[i],
            rate: s.rate,
            initial_rate: r_init[i],
        })
        .collect();
    let (accuracy_dense, accuracy_sparse) = match eval {
        Some(test) => (Some(evaluate(dense, test)?), Some(evaluate(&sparse, test)?)),
        None => (None, None),
    };
    let report = CalibrationReport {
        arch: dense.spec().arch.to_string(),
        plan: plan.clone(),
        calibration_samples: data.len(),
        normalization: norm,
        steps,
        allocation,
        achieved_rate: sparse.global_rate(),
        projection_scale,
        accuracy_dense,
        accuracy_sparse,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((sparse, report))
}
