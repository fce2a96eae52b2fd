//! Randomised invariants across modules.

use perturbnet::bound::{h_term, taylor_check, BoundInputs, McDesign, TraceMethod};
use perturbnet::data::gen_blobs;
use perturbnet::evalharness::aggregate;
use perturbnet::network::{Activation, Batch, ModelObjective, ModelSpec, ParamSet};
use perturbnet::objective::{Objective, Quadratic};
use perturbnet::optim::{rwp_step, sam_step, sgd_step, train, OptimState, OptimizerKind, StepHyper, TrainConfig};
use perturbnet::perturb::{sample_noise, NoiseFamily, NoiseSpec, Schedule, ScheduleKind};
use perturbnet::rng::{RngStream, StreamId};
use perturbnet::sharpness::{m_sharpness_over, SharpnessProbe};
use perturbnet::tensor::{l2_norm, DenseTensor};
use proptest::prelude::*;

fn random_batch(rng: &mut RngStream, n: usize, dim: usize, classes: usize) -> Batch {
    let mut x = vec![0.0; n * dim];
    rng.fill_standard_normal(&mut x);
    let labels = (0..n).map(|i| (i * 7 + (rng.uniform() * classes as f64) as usize) % classes).collect();
    Batch::new(DenseTensor::new(vec![n, dim], x).unwrap(), labels).unwrap()
}

/// `|a - f| / max(|a|, |f|, 1e-4)`.
fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-4)
}

/// Worst relative error over `coords`, skipping stencils that straddle a
/// ReLU kink (one-sided slopes disagree at O(1) there).
fn fd_max_rel_error(model: &ModelSpec, theta: &[f64], batch: &Batch, coords: &[usize]) -> f64 {
    let obj = ModelObjective::new(model, batch, 0.1);
    let g = obj.grad(theta).unwrap();
    let l0 = obj.loss(theta).unwrap();
    let h = 1e-6;
    let mut t = theta.to_vec();
    coords
        .iter()
        .filter_map(|&j| {
            t[j] = theta[j] + h;
            let lp = obj.loss(&t).unwrap();
            t[j] = theta[j] - h;
            let lm = obj.loss(&t).unwrap();
            t[j] = theta[j];
            let kink = ((lp - l0) - (l0 - lm)).abs() / h > 1e-3;
            (!kink).then(|| rel_err(g[j], (lp - lm) / (2.0 * h)))
        })
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradient_matches_central_differences(seed in 0u64..10_000, depth in 0usize..3, tanh in any::<bool>()) {
        let model = ModelSpec {
            input_dim: 3,
            hidden: vec![5; depth],
            activation: if tanh { Activation::Tanh } else { Activation::Relu },
            num_classes: 3,
        };
        let mut rng = RngStream::new(seed, StreamId::Init);
        let params = model.init(&mut rng);
        let batch = random_batch(&mut rng, 6, 3, 3);
        let k = params.len();
        let coords: Vec<usize> = (0..50.min(k)).map(|i| (i * 7919 + seed as usize) % k).collect();
        let err = fd_max_rel_error(&model, &params.theta, &batch, &coords);
        prop_assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn forward_loss_is_permutation_invariant(seed in 0u64..10_000) {
        let model = ModelSpec { input_dim: 2, hidden: vec![6], activation: Activation::Tanh, num_classes: 3 };
        let mut rng = RngStream::new(seed, StreamId::Init);
        let params = model.init(&mut rng);
        let batch = random_batch(&mut rng, 12, 2, 3);
        let mut idx: Vec<usize> = (0..12).collect();
        idx.reverse();
        idx.swap(0, 5);
        let a = model.forward_loss(&params.theta, &batch, 0.1).unwrap();
        let b = model.forward_loss(&params.theta, &batch.select(&idx), 0.1).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn schedules_are_monotone_and_clamp(max in 0.0f64..2.0, warm in 1usize..500, quad in any::<bool>()) {
        let s = Schedule {
            kind: if quad { ScheduleKind::Quadratic } else { ScheduleKind::Linear },
            max_strength: max,
            warmup_iters: warm,
        };
        let mut prev = 0.0;
        for t in 0..=2 * warm {
            let v = s.strength_at(t);
            prop_assert!(v >= prev);
            prev = v;
        }
        prop_assert_eq!(s.strength_at(warm), max);
        prop_assert_eq!(s.strength_at(2 * warm), max);
    }

    #[test]
    fn per_filter_noise_is_equivariant(c in 0.01f64..100.0, seed in 0u64..10_000) {
        let model = ModelSpec { input_dim: 3, hidden: vec![4], activation: Activation::Relu, num_classes: 2 };
        let p = model.init(&mut RngStream::new(seed, StreamId::Init));
        let spec = NoiseSpec::gaussian(0.1);
        let target = p.partition()[1];
        let mut theta = p.theta.clone();
        theta[target.range()].iter_mut().for_each(|w| *w *= c);
        let q = p.with_theta(theta).unwrap();
        let a = sample_noise(&p, &spec, &mut RngStream::new(seed, StreamId::NoiseTrain)).unwrap();
        let b = sample_noise(&q, &spec, &mut RngStream::new(seed, StreamId::NoiseTrain)).unwrap();
        for slice in p.partition() {
            for j in slice.range() {
                if *slice == target {
                    prop_assert!((b[j] - c * a[j]).abs() <= 1e-12 * b[j].abs().max(1e-300));
                } else {
                    prop_assert_eq!(a[j], b[j]);
                }
            }
        }
    }

    #[test]
    fn steps_leave_no_residue(seed in 0u64..10_000, sigma in 0.0f64..1.0, rho in 0.0f64..1.0) {
        let model = ModelSpec { input_dim: 2, hidden: vec![4], activation: Activation::Tanh, num_classes: 2 };
        let mut rng = RngStream::new(seed, StreamId::Init);
        let p = model.init(&mut rng);
        let batch = random_batch(&mut rng, 8, 2, 2);
        let obj = ModelObjective::new(&model, &batch, 0.1);
        let zero = StepHyper { lr: 0.0, momentum: 0.0, weight_decay: 0.0 };
        let mut s = OptimState::new(p.clone());
        rwp_step(&mut s, &obj, &zero, &NoiseSpec::gaussian(sigma), &mut RngStream::new(seed, StreamId::NoiseTrain)).unwrap();
        sam_step(&mut s, &obj, &zero, rho).unwrap();
        sgd_step(&mut s, &obj, &zero).unwrap();
        prop_assert_eq!(&s.params.theta, &p.theta);
    }

    #[test]
    fn sam_logs_rho_as_perturbation_norm(seed in 0u64..10_000, rho in 0.001f64..2.0) {
        let model = ModelSpec { input_dim: 2, hidden: vec![4], activation: Activation::Tanh, num_classes: 2 };
        let mut rng = RngStream::new(seed, StreamId::Init);
        let p = model.init(&mut rng);
        let batch = random_batch(&mut rng, 8, 2, 2);
        let obj = ModelObjective::new(&model, &batch, 0.1);
        let h = StepHyper { lr: 0.01, momentum: 0.9, weight_decay: 5e-4 };
        let mut s = OptimState::new(p);
        let r = sam_step(&mut s, &obj, &h, rho).unwrap();
        prop_assert!((r.perturbation_norm - rho).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_permutation_invariant(grid in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 1..5)) {
        let a = aggregate(&grid).unwrap();
        let mut rows = grid.clone();
        rows.reverse();
        for r in rows.iter_mut() {
            r.rotate_left(2);
        }
        let b = aggregate(&rows).unwrap();
        prop_assert!((a.mean_acc - b.mean_acc).abs() < 1e-12);
        prop_assert!((a.noise_std - b.noise_std).abs() < 1e-12);
        prop_assert!((a.weight_std.unwrap() - b.weight_std.unwrap()).abs() < 1e-12);
        prop_assert!(a.noise_std >= 0.0 && a.weight_std.unwrap() >= 0.0);
    }

    #[test]
    fn ascent_sharpness_exceeds_first_order(diag in prop::collection::vec(0.1f64..5.0, 1..6), rho in 0.0f64..1.0, seed in 0u64..1000) {
        let q = Quadratic::diagonal(&diag);
        let mut rng = RngStream::new(seed, StreamId::Init);
        let w: Vec<f64> = (0..diag.len()).map(|_| rng.standard_normal()).collect();
        let g = q.grad(&w).unwrap();
        let p = ParamSet::single_filter(w);
        let s = m_sharpness_over(&[&q], &p, &SharpnessProbe::ascent(rho, 1), &RngStream::new(0, StreamId::NoiseEval)).unwrap();
        prop_assert!(s >= rho * l2_norm(&g) - 1e-12);
    }

    #[test]
    fn stream_isolation(extra in 0usize..200, seed in any::<u64>()) {
        let mut shuffle_a = RngStream::new(seed, StreamId::DataShuffle);
        let mut noise = RngStream::new(seed, StreamId::NoiseTrain);
        for _ in 0..extra {
            noise.standard_normal();
        }
        let mut shuffle_b = RngStream::new(seed, StreamId::DataShuffle);
        for _ in 0..20 {
            prop_assert_eq!(shuffle_a.uniform(), shuffle_b.uniform());
        }
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[test]
fn h_term_monotone_on_log_grids() {
    let base = BoundInputs {
        k: 10,
        n: 100,
        delta: 0.05,
        w_norm_sq: 1.0,
        sigma: 0.1,
    };
    let by_sigma: Vec<f64> = log_grid(1e-3, 10.0, 20)
        .into_iter()
        .map(|sigma| h_term(&BoundInputs { sigma, ..base }).unwrap())
        .collect();
    assert!(by_sigma.windows(2).all(|w| w[1] < w[0]));
    let by_norm: Vec<f64> = log_grid(1e-3, 1e3, 20)
        .into_iter()
        .map(|w_norm_sq| h_term(&BoundInputs { w_norm_sq, ..base }).unwrap())
        .collect();
    assert!(by_norm.windows(2).all(|w| w[1] > w[0]));
}

/// `Σ log cosh(w_j − c_j)`: smooth, separable, non-quadratic.
struct LogCosh {
    center: Vec<f64>,
}

impl Objective for LogCosh {
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn loss(&self, theta: &[f64]) -> perturbnet::Result<f64> {
        Ok(theta.iter().zip(&self.center).map(|(w, c)| (w - c).cosh().ln()).sum())
    }
    fn loss_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> perturbnet::Result<f64> {
        for ((g, w), c) in grad.iter_mut().zip(theta).zip(&self.center) {
            *g = (w - c).tanh();
        }
        self.loss(theta)
    }
}

#[test]
fn taylor_gap_shrinks_cubically() {
    // Antithetic pairs cancel odd orders and moment matching removes the σ²
    // sampling error, leaving the O(σ⁴) remainder.
    let obj = LogCosh {
        center: vec![0.3, -0.2, 0.5, 0.1],
    };
    let p = ParamSet::single_filter(vec![0.0; 4]);
    let ratios: Vec<f64> = [0.04, 0.02, 0.01]
        .iter()
        .map(|&s| {
            let t = taylor_check(&obj, &p, s, 4000, TraceMethod::Dense, McDesign::MomentMatched, &RngStream::new(3, StreamId::NoiseEval))
                .unwrap();
            t.gap / (s * s * s)
        })
        .collect();
    // O(σ³): the ratio may shrink with σ but never grow past 4× its value
    // at the largest σ.
    assert!(ratios.iter().all(|r| *r <= 4.0 * ratios[0]), "{ratios:?}");
}

#[test]
fn reductions_are_bitwise_on_blobs() {
    let mut rng = RngStream::new(5, StreamId::Init);
    let tr = gen_blobs(3, 40, 3, 4.0, &mut rng).unwrap();
    let va = gen_blobs(3, 20, 3, 4.0, &mut rng).unwrap();
    let model = ModelSpec {
        input_dim: 3,
        hidden: vec![8],
        activation: Activation::Relu,
        num_classes: 3,
    };
    let run = |optimizer| {
        let cfg = TrainConfig {
            optimizer,
            epochs: 5,
            batch_size: 16,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            label_smoothing: 0.1,
            noise: NoiseFamily::Gaussian,
            schedule: Schedule::constant(0.0),
            seed: 11,
            monitor_sigmas: vec![0.05],
            monitor_draws: 2,
        };
        train(&model, &tr, &va, &cfg).unwrap()
    };
    let sgd = run(OptimizerKind::Sgd);
    let rwp = run(OptimizerKind::Rwp);
    let sam = run(OptimizerKind::Sam);
    assert_eq!(sgd.log, rwp.log);
    assert_eq!(sgd.log, sam.log);
    assert_eq!(sgd.final_params, rwp.final_params);
}

#[test]
fn hutchinson_matches_dense_trace_on_tiny_mlp() {
    use perturbnet::sharpness::{dense_hessian_trace, hessian_trace};
    let model = ModelSpec {
        input_dim: 2,
        hidden: vec![6],
        activation: Activation::Tanh,
        num_classes: 2,
    };
    let mut rng = RngStream::new(21, StreamId::Init);
    let p = model.init(&mut rng);
    let batch = random_batch(&mut rng, 30, 2, 2);
    let obj = ModelObjective::new(&model, &batch, 0.0);
    let dense = dense_hessian_trace(&obj, &p.theta).unwrap();
    let est = hessian_trace(&obj, &p.theta, 4000, &RngStream::new(1, StreamId::NoiseEval)).unwrap();
    assert!((est.trace - dense).abs() < 0.05 * dense.abs(), "{} vs {dense}", est.trace);
}
