//! Randomized invariants across the public API.

use gift_core::data::{synthetic_blobs, synthetic_linear, Dataset};
use gift_core::device::Device;
use gift_core::gift::{estimate_direction, gift_run, gift_search, EvalReport, InSituEvaluator};
use gift_core::gradients::backward;
use gift_core::model::{forward_deterministic, forward_noisy, project};
use gift_core::noise::sample_noise;
use gift_core::trainer::{init_params, train, InitScheme, StepSchedule, TrainLength};
use gift_core::{
    Architecture, Direction, GiftConfig, Hyperrectangle, NoiseDraw, NoiseFamily, NoiseModel, Params, Result, RngStream,
    StopRule, TrainConfig,
};
use proptest::prelude::*;

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 2..5)
}

fn family_strategy() -> impl Strategy<Value = NoiseFamily> {
    prop_oneof![
        Just(NoiseFamily::GaussianAdditive),
        Just(NoiseFamily::GaussianMultiplicative),
        Just(NoiseFamily::Laplace),
        Just(NoiseFamily::Uniform),
    ]
}

fn params(dims: &[usize], seed: u64) -> Params {
    let arch = Architecture::tanh(dims).unwrap();
    init_params(&arch, InitScheme::UniformScaled, RngStream::root(seed))
}

fn input(dim: usize, seed: u64) -> ndarray::Array1<f64> {
    let d = synthetic_blobs(dim, 2, 1, 1.0, RngStream::root(seed)).unwrap();
    d.input(0).to_owned()
}

/// Evaluator scoring `sum (w - c)^2` plus a bounded ripple, so searches can
/// meet several local structures.
struct Bowl {
    center: Vec<f64>,
    ripple: f64,
}

impl InSituEvaluator for Bowl {
    fn evaluate(&mut self, params: &Params) -> Result<EvalReport> {
        let w = params.tensors().to_flat();
        let loss: f64 =
            w.iter().zip(&self.center).map(|(a, c)| (a - c).powi(2) + self.ripple * (7.0 * a).sin()).sum();
        Ok(EvalReport { loss, loss_se: 0.0, accuracy: None, accuracy_se: None, samples: 1, queries: 1 })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_noise_forward_equals_deterministic(dims in dims_strategy(), seed in any::<u64>()) {
        let p = params(&dims, seed);
        let x = input(dims[0], seed ^ 1);
        let traced = forward_noisy(&p, x.view(), &NoiseDraw::zeros(p.arch())).unwrap();
        let plain = forward_deterministic(&p, x.view()).unwrap();
        prop_assert_eq!(traced.output(), &plain);
    }

    #[test]
    fn backprop_matches_central_differences(dims in dims_strategy(), seed in any::<u64>(), s in 0.01f64..0.5) {
        let p = params(&dims, seed);
        let x = input(dims[0], seed ^ 2);
        let y = input(*dims.last().unwrap(), seed ^ 3);
        let noise = sample_noise(p.arch(), &NoiseModel::gaussian(s).unwrap(), RngStream::root(seed ^ 4)).unwrap();
        let loss = |q: &Params| {
            let out = forward_noisy(q, x.view(), &noise).unwrap();
            (&y - out.output()).mapv(|v| v * v).sum()
        };
        let trace = forward_noisy(&p, x.view(), &noise).unwrap();
        let grad = backward(&trace, y.view(), &p).unwrap().gradient.to_flat();
        let flat = p.tensors().to_flat();
        let h = 1e-5;
        for (i, g) in grad.iter().enumerate() {
            let mut t = p.tensors().clone();
            let mut v = flat.clone();
            v[i] += h;
            t.set_flat(&v).unwrap();
            let up = loss(&Params::from_tensors(p.arch(), t.clone()).unwrap());
            v[i] -= 2.0 * h;
            t.set_flat(&v).unwrap();
            let down = loss(&Params::from_tensors(p.arch(), t).unwrap());
            let fd = (up - down) / (2.0 * h);
            prop_assert!((g - fd).abs() <= 1e-6 * g.abs().max(1.0), "component {}: {} vs {}", i, g, fd);
        }
    }

    #[test]
    fn projection_lands_in_the_box_and_is_idempotent(
        dims in dims_strategy(), seed in any::<u64>(), scale in 0.1f64..3.0, wmax in 0.05f64..1.0, bmax in 0.05f64..1.0,
    ) {
        let p = params(&dims, seed);
        let big = Params::from_tensors(p.arch(), p.tensors().scaled(10.0 * scale)).unwrap();
        let h = Hyperrectangle::new(-wmax, wmax, -bmax, bmax).unwrap();
        let once = project(&big, &h);
        prop_assert!(h.contains(once.tensors()));
        let twice = project(&once, &h);
        prop_assert_eq!(twice.tensors(), once.tensors());
    }

    #[test]
    fn line_search_never_degrades(
        seed in any::<u64>(), eta in 0.0f64..2.0, steps in 1usize..12, ripple in 0.0f64..0.5, both in any::<bool>(),
    ) {
        let w0 = params(&[2, 2], seed);
        let n = w0.arch().num_params();
        let center: Vec<f64> = input(n, seed ^ 5).to_vec();
        let mut dir = w0.tensors().clone();
        dir.set_flat(&input(n, seed ^ 6).to_vec()).unwrap();
        let rule = if both { StopRule::BothWorse } else { StopRule::EitherWorse };
        let cfg = GiftConfig { eta, k1: 1, k2: 1, max_steps: steps, stop_rule: rule };
        let mut bowl = Bowl { center, ripple };
        let out = gift_search(&mut bowl, &w0, &Direction(dir), &cfg).unwrap();
        let tuned = bowl.evaluate(&out.params).unwrap().loss;
        prop_assert!(tuned <= out.trace.baseline.loss);
        prop_assert!(out.trace.steps <= steps);
        prop_assert_eq!(out.trace.candidates.len(), 2 * out.trace.steps);
    }

    #[test]
    fn device_search_accounts_queries_and_repeats(
        seed in any::<u64>(), family in family_strategy(), s_t in 0.05f64..0.5, k1 in 1usize..20, k2 in 1usize..4,
    ) {
        let data = synthetic_blobs(3, 3, 60, 1.0, RngStream::root(seed)).unwrap();
        let w0 = params(&[3, 4, 3], seed ^ 7);
        let direction = estimate_direction(&w0, &data, 0.1, 10, 3, RngStream::root(seed ^ 8)).unwrap();
        let cfg = GiftConfig { eta: 0.05, k1, k2, max_steps: 4, stop_rule: StopRule::BothWorse };
        let run = || {
            let mut device = Device::new(w0.clone(), NoiseModel::new(family, s_t).unwrap(), seed).unwrap();
            let out = gift_run(&mut device, &w0, &direction, &cfg, &data, RngStream::root(seed ^ 9)).unwrap();
            (out, device.query_count())
        };
        let (a, used) = run();
        let (b, _) = run();
        prop_assert_eq!(a.trace.queries, ((1 + 2 * a.trace.steps) * k1 * k2) as u64);
        prop_assert_eq!(used, a.trace.queries);
        prop_assert!(a.trace.selected_report().loss <= a.trace.baseline.loss);
        prop_assert_eq!(a.trace.to_json().unwrap(), b.trace.to_json().unwrap());
    }

    #[test]
    fn zero_weight_direction_is_affine_in_targets(seed in any::<u64>(), s0 in 0.05f64..0.5, c in -3.0f64..3.0) {
        // With zero weights the residual is the target minus output noise,
        // so under shared noise the estimate is affine in the targets.
        let data = synthetic_linear(&[0.4, -0.2, 0.7], 1.0, 30, RngStream::root(seed)).unwrap();
        let scaled = |k: f64| Dataset::new(data.inputs().clone(), data.targets() * k, data.meta.clone()).unwrap();
        let w0 = Params::zeros(&Architecture::new(vec![3, 1], gift_core::Activation::Identity).unwrap());
        let est = |k: f64| estimate_direction(&w0, &scaled(k), s0, 8, 4, RngStream::root(seed ^ 1)).unwrap().to_flat();
        let (d0, d1, dc) = (est(0.0), est(1.0), est(c));
        for i in 0..d0.len() {
            let predicted = d0[i] + c * (d1[i] - d0[i]);
            prop_assert!((predicted - dc[i]).abs() <= 1e-9 * (d0[i].abs() + d1[i].abs()).max(1e-12));
        }
    }

    #[test]
    fn projected_training_keeps_every_iterate_in_the_box(seed in any::<u64>(), bound in 0.05f64..0.3) {
        let data = synthetic_blobs(3, 2, 40, 1.0, RngStream::root(seed)).unwrap();
        let arch = Architecture::tanh(&[3, 4, 2]).unwrap();
        let h = Hyperrectangle::new(-bound, bound, -bound, bound).unwrap();
        let mut w = None;
        // One step at a time so each iterate can be inspected.
        for step in 0..6u64 {
            let cfg = TrainConfig {
                s0: 0.1,
                batch_size: 8,
                length: TrainLength::Steps(1),
                schedule: StepSchedule { eps0: 0.5, decay: 1.0, tau: 10.0 },
                projection: Some(h),
                seed: seed.wrapping_add(step),
                init: InitScheme::UniformScaled,
            };
            let out = train(&arch, &cfg, &data, w.take()).unwrap();
            prop_assert!(h.contains(out.params.tensors()));
            w = Some(out.params);
        }
    }

    #[test]
    fn splits_and_batches_partition_indices(seed in any::<u64>(), n in 2usize..200, frac in 0.05f64..0.95, bs in 1usize..40) {
        let data = synthetic_linear(&[1.0], 1.0, n, RngStream::root(seed)).unwrap();
        let n_test = ((n as f64 * frac) as usize).clamp(1, n - 1);
        let (train_a, test_a) = data.split(n_test, RngStream::root(seed ^ 1)).unwrap();
        let (train_b, _) = data.split(n_test, RngStream::root(seed ^ 1)).unwrap();
        prop_assert_eq!(train_a.inputs(), train_b.inputs());
        prop_assert_eq!(train_a.len() + test_a.len(), n);
        // Inputs are continuous draws, so equal rows mean equal indices.
        for t in test_a.inputs().column(0) {
            prop_assert!(!train_a.inputs().column(0).iter().any(|v| v == t));
        }
        let batches = data.batches(bs, RngStream::root(seed ^ 2)).unwrap();
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}
