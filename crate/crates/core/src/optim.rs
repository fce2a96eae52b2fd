//! SGD, SAM and RWP on a shared perturb → evaluate → restore → update step.
//!
//! Every step computes `g₀ = ∇L(w)`, draws `ε` (zero for SGD, the ascent step
//! for SAM, a noise draw for RWP), takes the update gradient at `w + ε`, and
//! then applies heavy-ball momentum with weight decay on the unperturbed `w`:
//!
//! ```text
//! g = ∇L(w + ε) + λ w
//! v ← μ v + g
//! w ← w − η_t v
//! ```
//!
//! With zero strength `ε` is exactly zero, no randomness is consumed, and the
//! three optimizers follow bit-identical trajectories.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evalharness::noisy_accuracy;
use crate::network::{ModelObjective, ModelSpec, ParamSet};
use crate::objective::Objective;
use crate::perturb::{NoiseFamily, NoiseSpec, Perturbation, Schedule};
use crate::rng::{RngStream, StreamId};
use crate::tensor::{all_finite, dot, l2_norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Sam,
    Rwp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// RWP noise family; its strength comes from `schedule` at every step.
    #[serde(default = "default_noise")]
    pub noise: NoiseFamily,
    /// Strength schedule: σ for RWP, ρ for SAM, ignored for SGD.
    pub schedule: Schedule,
    pub seed: u64,
    /// Test-time strengths monitored on the validation set after each epoch.
    /// The first one drives early stopping.
    #[serde(default)]
    pub monitor_sigmas: Vec<f64>,
    /// Noise draws per monitored strength per epoch.
    #[serde(default = "default_monitor_draws")]
    pub monitor_draws: usize,
}

fn default_noise() -> NoiseFamily {
    NoiseFamily::Gaussian
}

fn default_monitor_draws() -> usize {
    2
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::domain(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be >= 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::domain("weight_decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::domain("label_smoothing must be in [0,1)"));
        }
        if self.monitor_draws == 0 {
            return Err(Error::domain("monitor_draws must be >= 1"));
        }
        if self.monitor_sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::domain("monitor sigmas must be >= 0"));
        }
        self.schedule.validate()
    }

    /// Per-filter noise of this config's family at `strength`.
    pub fn noise_spec(&self, strength: f64) -> NoiseSpec {
        NoiseSpec {
            family: self.noise.clone(),
            strength,
            per_filter_scaling: !matches!(self.noise, NoiseFamily::Device { .. }),
        }
    }

    pub fn perturbation(&self, strength: f64) -> Perturbation {
        match self.optimizer {
            OptimizerKind::Sgd => Perturbation::None,
            OptimizerKind::Sam => Perturbation::Ascent { rho: strength },
            OptimizerKind::Rwp => Perturbation::Random(self.noise_spec(strength)),
        }
    }
}

/// `lr0 · (1 + cos(π t / total)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = t.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub params: ParamSet,
    pub velocity: Vec<f64>,
    pub step: usize,
}

impl OptimState {
    pub fn new(params: ParamSet) -> Self {
        let velocity = vec![0.0; params.len()];
        Self {
            params,
            velocity,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Diagnostics of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Minibatch loss at the unperturbed weights.
    pub loss: f64,
    /// `‖∇L(w + ε)‖₂`, excluding weight decay.
    pub update_grad_norm: f64,
    /// `L(w + ε) − L(w)` on the minibatch.
    pub grad_sharpness: f64,
    /// `cos∠(∇L(w), ∇L(w + ε))`; `None` if either gradient is zero.
    pub cos_sim: Option<f64>,
    pub perturbation_norm: f64,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// One step with an explicit `ε`.
pub fn step_with_perturbation<O: Objective>(
    state: &mut OptimState,
    obj: &O,
    hyper: &StepHyper,
    eps: &[f64],
) -> Result<StepReport> {
    let k = state.params.len();
    let mut g0 = vec![0.0; k];
    let loss = obj.loss_and_grad(&state.params.theta, &mut g0)?;
    finish_step(state, obj, hyper, loss, g0, eps.to_vec())
}

/// One step whose `ε` comes from `perturbation`.
pub fn perturbed_step<O: Objective>(
    state: &mut OptimState,
    obj: &O,
    hyper: &StepHyper,
    perturbation: &Perturbation,
    rng: &mut RngStream,
) -> Result<StepReport> {
    let k = state.params.len();
    let mut g0 = vec![0.0; k];
    let loss = obj.loss_and_grad(&state.params.theta, &mut g0)?;
    let eps = perturbation.draw(&state.params, &g0, rng)?;
    finish_step(state, obj, hyper, loss, g0, eps)
}

fn finish_step<O: Objective>(
    state: &mut OptimState,
    obj: &O,
    hyper: &StepHyper,
    loss: f64,
    g0: Vec<f64>,
    eps: Vec<f64>,
) -> Result<StepReport> {
    let perturbation_norm = l2_norm(&eps);
    let (perturbed_loss, g_update) = if eps.iter().all(|e| *e == 0.0) {
        (loss, g0.clone())
    } else {
        let shifted: Vec<f64> = state.params.theta.iter().zip(&eps).map(|(w, e)| w + e).collect();
        let mut g = vec![0.0; shifted.len()];
        let l = obj.loss_and_grad(&shifted, &mut g)?;
        (l, g)
    };
    // w itself was never overwritten, so nothing of ε survives past here.
    let report = StepReport {
        loss,
        update_grad_norm: l2_norm(&g_update),
        grad_sharpness: perturbed_loss - loss,
        cos_sim: cosine_similarity(&g0, &g_update),
        perturbation_norm,
    };

    let theta = &mut state.params.theta;
    for ((w, v), g) in theta.iter_mut().zip(&mut state.velocity).zip(&g_update) {
        let g = g + hyper.weight_decay * *w;
        *v = hyper.momentum * *v + g;
        *w -= hyper.lr * *v;
    }
    if !all_finite(theta) || !all_finite(&state.velocity) {
        return Err(Error::NonFiniteUpdate {
            step: state.step,
            detail: format!(
                "loss {loss}, update gradient norm {}, lr {}",
                report.update_grad_norm, hyper.lr
            ),
        });
    }
    state.step += 1;
    Ok(report)
}

pub fn sgd_step<O: Objective>(state: &mut OptimState, obj: &O, hyper: &StepHyper) -> Result<StepReport> {
    let mut unused = RngStream::new(0, StreamId::NoiseTrain);
    perturbed_step(state, obj, hyper, &Perturbation::None, &mut unused)
}

pub fn sam_step<O: Objective>(
    state: &mut OptimState,
    obj: &O,
    hyper: &StepHyper,
    rho: f64,
) -> Result<StepReport> {
    let mut unused = RngStream::new(0, StreamId::NoiseTrain);
    perturbed_step(state, obj, hyper, &Perturbation::Ascent { rho }, &mut unused)
}

pub fn rwp_step<O: Objective>(
    state: &mut OptimState,
    obj: &O,
    hyper: &StepHyper,
    noise: &NoiseSpec,
    rng: &mut RngStream,
) -> Result<StepReport> {
    perturbed_step(state, obj, hyper, &Perturbation::Random(noise.clone()), rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyAccuracy {
    pub sigma: f64,
    pub acc: f64,
}

/// One line of `metrics.jsonl`; per-step quantities are epoch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc_clean: f64,
    pub val_acc_noisy: Vec<NoisyAccuracy>,
    pub grad_norm_mean: f64,
    pub grad_sharpness_mean: f64,
    pub cos_sim_mean: Option<f64>,
    pub perturbation_norm_mean: f64,
    /// `‖w_end − w_start‖₂` over the epoch.
    pub step_distance: f64,
    /// Learning rate and strength at the epoch's last step.
    pub lr: f64,
    pub strength_t: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: ParamSet,
    /// Best weights per monitored sigma (or by clean accuracy when none are
    /// monitored); index 0 is the early-stopping pick.
    pub best: Vec<ParamSet>,
    pub best_epoch: Vec<usize>,
    pub final_params: ParamSet,
    pub log: Vec<MetricsRecord>,
}

impl TrainOutcome {
    pub fn best(&self) -> &ParamSet {
        &self.best[0]
    }
}

/// Steps per epoch for `n` examples in batches of `m`.
pub fn steps_per_epoch(n: usize, m: usize) -> usize {
    n.div_ceil(m)
}

/// Full training run with per-epoch validation and early stopping.
pub fn train(model: &ModelSpec, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let initial = model.init(&mut RngStream::new(cfg.seed, StreamId::Init));
    train_from(model, initial, train_set, val_set, cfg)
}

pub fn train_from(
    model: &ModelSpec,
    initial: ParamSet,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut shuffle_rng = RngStream::new(cfg.seed, StreamId::DataShuffle);
    let mut noise_rng = RngStream::new(cfg.seed, StreamId::NoiseTrain);
    let eval_rng = RngStream::new(cfg.seed, StreamId::NoiseEval);

    let total = cfg.epochs * steps_per_epoch(train_set.len(), cfg.batch_size);
    let slots = cfg.monitor_sigmas.len().max(1);
    let mut best = vec![initial.clone(); slots];
    let mut best_score = vec![f64::NEG_INFINITY; slots];
    let mut best_epoch = vec![0; slots];
    let mut state = OptimState::new(initial.clone());
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let start = state.params.theta.clone();
        let batches = train_set.shuffled_minibatches(cfg.batch_size, &mut shuffle_rng);
        let mut sums = [0.0; 4];
        let (mut cos_sum, mut cos_n) = (0.0, 0usize);
        let (mut lr, mut strength) = (0.0, 0.0);
        for batch in &batches {
            let t = state.step;
            lr = cosine_lr(t, total, cfg.lr0);
            strength = match cfg.optimizer {
                OptimizerKind::Sgd => 0.0,
                _ => cfg.schedule.strength_at(t),
            };
            let hyper = StepHyper {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            let obj = ModelObjective::new(model, batch, cfg.label_smoothing);
            let r = perturbed_step(&mut state, &obj, &hyper, &cfg.perturbation(strength), &mut noise_rng)?;
            sums[0] += r.loss;
            sums[1] += r.update_grad_norm;
            sums[2] += r.grad_sharpness;
            sums[3] += r.perturbation_norm;
            if let Some(c) = r.cos_sim {
                cos_sum += c;
                cos_n += 1;
            }
        }
        let nb = batches.len() as f64;
        let val_acc_clean = model.accuracy(&state.params.theta, &[&val_set.data])?;
        let mut val_acc_noisy = Vec::with_capacity(cfg.monitor_sigmas.len());
        for (i, sigma) in cfg.monitor_sigmas.iter().enumerate() {
            let rng = eval_rng.substream(epoch as u64).substream(i as u64);
            let accs = noisy_accuracy(model, &state.params, val_set, &cfg.noise_spec(*sigma), cfg.monitor_draws, &rng)?;
            let acc = accs.iter().sum::<f64>() / accs.len() as f64;
            val_acc_noisy.push(NoisyAccuracy { sigma: *sigma, acc });
        }
        let scores: Vec<f64> = if val_acc_noisy.is_empty() {
            vec![val_acc_clean]
        } else {
            val_acc_noisy.iter().map(|n| n.acc).collect()
        };
        for (i, s) in scores.into_iter().enumerate() {
            if s > best_score[i] {
                best_score[i] = s;
                best[i] = state.params.clone();
                best_epoch[i] = epoch;
            }
        }
        log.push(MetricsRecord {
            epoch,
            train_loss: sums[0] / nb,
            val_acc_clean,
            val_acc_noisy,
            grad_norm_mean: sums[1] / nb,
            grad_sharpness_mean: sums[2] / nb,
            cos_sim_mean: (cos_n > 0).then(|| cos_sum / cos_n as f64),
            perturbation_norm_mean: sums[3] / nb,
            step_distance: crate::tensor::distance(&start, &state.params.theta),
            lr,
            strength_t: strength,
        });
    }

    Ok(TrainOutcome {
        initial,
        best,
        best_epoch,
        final_params: state.params,
        log,
    })
}
