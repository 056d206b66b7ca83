use ptsparse_core::allocator::{project_thresholds, threshold_grad, LayerState};
use ptsparse_core::autodiff::Graph;
use ptsparse_core::kde::empirical_sparsity;
use ptsparse_core::losses::{reconstruction_loss_graph, weighted_mean, GlobalSparsityState};
use ptsparse_core::masking::{apply_mask, masked_forward, smoothed_mask, MaskSpec};
use ptsparse_core::zoo::synth::{generate, SynthConfig};
use ptsparse_core::zoo::{Layer, LayerKind, Normalization};
use ptsparse_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn small_data(count: usize, seed: u64) -> Dataset {
    generate(&SynthConfig { count, seed, ..Default::default() }).unwrap()
}

fn small_mlp(data: &Dataset, seed: u64) -> Network {
    let spec = ModelSpec::new("mlp-1x32".parse().unwrap(), data.input_shape(), 10).unwrap();
    let mut net = Network::init(spec, seed);
    net.set_normalization(data.pixel_statistics());
    net
}

fn thresholds(report: &CalibrationReport) -> Vec<f64> {
    report.allocation.iter().map(|a| a.threshold).collect()
}

#[test]
fn masked_forward_by_hand() {
    let input = InputShape { channels: 1, height: 1, width: 2 };
    let spec = ModelSpec::new("mlp-0x0".parse().unwrap(), input, 2).unwrap();
    let layer = Layer {
        name: "fc1".into(),
        kind: LayerKind::Dense { inputs: 2, outputs: 2 },
        weight: Tensor::matrix(2, 2, vec![1.0, -0.2, 0.5, 3.0]).unwrap(),
        bias: Tensor::vector(vec![0.1, -0.1]).unwrap(),
    };
    let net = Network::from_parts(spec, vec![layer], Normalization::default()).unwrap();
    let x = Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap();
    // |0.5| = t is pruned along with -0.2
    let mask = MaskSpec::new(0, &net.layers()[0].weight, 0.5);
    assert_eq!(mask.mask.data(), &[1.0, 0.0, 0.0, 1.0]);
    let out = masked_forward(&net, &x, &[mask]).unwrap();
    assert_eq!(out.data(), &[2.1, 2.9]);
    assert_eq!(net.forward(&x).unwrap().data(), &[2.6, 2.5]);
}

/// `L(t) = KL(dense ‖ net with W ⊙ smooth_mask(W, t))` summed over layers
/// plus `λ L_c` of the bridge rates, as a function of all thresholds.
fn smoothed_objective(net: &Network, states: &[LayerState], t: &[f64], x: &Tensor, teacher: &Tensor, target: f64, lambda: f64) -> f64 {
    let weights: Vec<Tensor> = net
        .layers()
        .iter()
        .zip(states)
        .zip(t)
        .map(|((l, s), &ti)| apply_mask(&l.weight, &smoothed_mask(&l.weight, ti, s.kde().bandwidth())).unwrap())
        .collect();
    let logits = net.forward_with(x, &weights).unwrap();
    let mut g = Graph::new();
    let sv = g.constant(logits);
    let l = reconstruction_loss_graph(&mut g, teacher, sv).unwrap();
    let rates: Vec<f64> = states.iter().zip(t).map(|(s, &ti)| s.kde().rate(ti).unwrap()).collect();
    let state = GlobalSparsityState::new(rates, net.weight_counts(), target).unwrap();
    g.value(l).item().unwrap() + lambda * state.control_loss()
}

#[test]
fn threshold_gradient_matches_finite_differences_of_the_smoothed_objective() {
    let data = small_data(32, 3);
    let net = small_mlp(&data, 4);
    let idx: Vec<usize> = (0..32).collect();
    let x = data.batch(&idx, net.normalization());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // a teacher that disagrees with the network so the KL gradient is not tiny
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut teacher = net.forward(&x).unwrap();
    for v in teacher.data_mut() {
        *v += noise.sample(&mut rng);
    }
    let mut states: Vec<LayerState> = net
        .layers()
        .iter()
        .map(|l| LayerState::new(&l.name, &l.weight, &KdeConfig::default(), 0, true).unwrap())
        .collect();
    let t: Vec<f64> = states.iter().map(|s| 0.8 * s.scale).collect();
    for (s, &ti) in states.iter_mut().zip(&t) {
        s.set_threshold(ti).unwrap();
    }
    let (target, lambda) = (0.9, 10.0);

    // analytic: G = ∂L/∂(M ⊙ W) at the smoothed mask, then ∂L/∂M = G ⊙ W
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv: Vec<_> = net
        .layers()
        .iter()
        .zip(&states)
        .map(|(l, s)| g.param(apply_mask(&l.weight, &smoothed_mask(&l.weight, s.threshold(), s.kde().bandwidth())).unwrap()))
        .collect();
    let bv: Vec<_> = net.layers().iter().map(|l| g.constant(l.bias.clone())).collect();
    let out = net.forward_graph(&mut g, xv, &wv, &bv).unwrap();
    let loss = reconstruction_loss_graph(&mut g, &teacher, out).unwrap();
    g.backward(loss).unwrap();
    let rates: Vec<f64> = states.iter().map(|s| s.rate()).collect();
    let control = GlobalSparsityState::new(rates, net.weight_counts(), target).unwrap();

    for (l, layer) in net.layers().iter().enumerate() {
        let dl_dm = g.grad(wv[l]).unwrap().zip_map(&layer.weight, |a, b| a * b).unwrap();
        let analytic = threshold_grad(&states[l], l, &layer.weight, &dl_dm, &control, lambda).unwrap();
        let eps = 1e-4 * states[l].scale;
        let mut plus = t.clone();
        plus[l] += eps;
        let mut minus = t.clone();
        minus[l] -= eps;
        let fd = (smoothed_objective(&net, &states, &plus, &x, &teacher, target, lambda)
            - smoothed_objective(&net, &states, &minus, &x, &teacher, target, lambda))
            / (2.0 * eps);
        let rel = (analytic - fd).abs() / fd.abs().max(1e-9);
        assert!(rel <= 0.05, "layer {l}: analytic {analytic} fd {fd}");
    }
}

#[test]
fn fixed_allocations_keep_their_thresholds() {
    let data = small_data(256, 6);
    let net = small_mlp(&data, 7);
    for allocator in [AllocatorKind::Uniform, AllocatorKind::Erk, AllocatorKind::L2Norm] {
        let base = CalibrationPlan {
            allocator,
            learn_rates: Some(false),
            reconstruct: false,
            ..CalibrationPlan::with_target(0.6)
        };
        let (sparse, oneshot) = calibrate(&net, &data, &base, None).unwrap();
        assert!(oneshot.steps.is_empty(), "{allocator}: no learning and no reconstruction runs no steps");
        let empirical: Vec<f64> =
            net.layers().iter().zip(thresholds(&oneshot)).map(|(l, t)| empirical_sparsity(l.weight.data(), t)).collect();
        assert_eq!(sparse.rates(), empirical);
        assert!((oneshot.achieved_rate - 0.6).abs() < 0.03, "{allocator}: {}", oneshot.achieved_rate);

        let recon = CalibrationPlan { reconstruct: true, steps: Some(6), ..base };
        let (_, rep) = calibrate(&net, &data, &recon, None).unwrap();
        assert_eq!(rep.steps.len(), 6);
        assert_eq!(thresholds(&rep), thresholds(&oneshot), "{allocator}");
    }
}

#[test]
fn zero_step_budget_returns_the_initial_allocation() {
    let data = small_data(128, 8);
    let net = small_mlp(&data, 9);
    let plan = CalibrationPlan { steps: Some(0), ..CalibrationPlan::with_target(0.5) };
    let (sparse, rep) = calibrate(&net, &data, &plan, Some(&data)).unwrap();
    assert!(rep.steps.is_empty());
    for a in &rep.allocation {
        assert!(a.threshold >= 0.0);
    }
    assert!((rep.rate_from_allocation() - sparse.global_rate()).abs() < 1e-12);
    assert!(rep.accuracy_dense.is_some() && rep.accuracy_sparse.is_some());
}

#[test]
fn all_ones_masks_evaluate_like_the_dense_network() {
    let data = small_data(200, 10);
    let net = small_mlp(&data, 11);
    let ones: Vec<Tensor> = net.layers().iter().map(|l| Tensor::full(l.weight.shape(), 1.0)).collect();
    let sparse = SparseModel::from_masks(&net, &ones).unwrap();
    assert_eq!(sparse.global_rate(), 0.0);
    assert_eq!(evaluate(&net, &data).unwrap(), evaluate(&sparse, &data).unwrap());
}

#[test]
fn projection_lands_within_tolerance() {
    let data = small_data(256, 12);
    let net = small_mlp(&data, 13);
    let counts = net.weight_counts();
    let rate = |t: &[f64]| {
        let r: Vec<f64> = net.layers().iter().zip(t).map(|(l, &ti)| empirical_sparsity(l.weight.data(), ti)).collect();
        weighted_mean(&r, &counts)
    };
    let mut t = vec![0.01, 0.05];
    let alpha = project_thresholds(&net, &mut t, 0.75).unwrap();
    assert!(alpha > 0.0);
    assert!((rate(&t) - 0.75).abs() <= 1e-3, "{}", rate(&t));
    let again = project_thresholds(&net, &mut t, 0.75).unwrap();
    assert_eq!(again, 1.0);
    assert!(project_thresholds(&net, &mut [0.0, 0.0], 0.5).is_err());

    let plan = CalibrationPlan {
        allocator: AllocatorKind::Uniform,
        learn_rates: Some(false),
        reconstruct: false,
        project_to_target: true,
        ..CalibrationPlan::with_target(0.83)
    };
    let (sparse, rep) = calibrate(&net, &data, &plan, None).unwrap();
    assert!(rep.projection_scale.is_some());
    assert!((sparse.global_rate() - 0.83).abs() <= 1e-3);
}

#[test]
fn bad_inputs_are_rejected_before_work() {
    let data = small_data(16, 14);
    let net = small_mlp(&data, 15);
    let err = calibrate(&net, &data, &CalibrationPlan::with_target(1.0), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let other = generate(&SynthConfig { count: 16, side: 14, ..Default::default() }).unwrap();
    let err = calibrate(&net, &other, &CalibrationPlan::default(), None).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    assert!(!err.is_numerical());
}

#[test]
fn calibration_is_seeded() {
    let data = small_data(256, 16);
    let net = small_mlp(&data, 17);
    let plan = CalibrationPlan { steps: Some(12), batch_size: 32, ..CalibrationPlan::with_target(0.7) };
    let (a, ra) = calibrate(&net, &data, &plan, None).unwrap();
    let (b, rb) = calibrate(&net, &data, &plan, None).unwrap();
    assert_eq!(ra, CalibrationReport { wall_clock_seconds: ra.wall_clock_seconds, ..rb });
    assert_eq!(a.to_bytes(), b.to_bytes());
    let (_, rc) = calibrate(&net, &data, &CalibrationPlan { seed: 1, ..plan }, None).unwrap();
    assert_ne!(ra.steps, rc.steps);
}
