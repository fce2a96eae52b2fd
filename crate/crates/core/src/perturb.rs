//! Weight-noise distributions, the SAM ascent step and strength schedules.
//!
//! # Noise scale
//!
//! Gaussian noise on a filter `f` has standard deviation `σ · max_j |w_j|`
//! over that filter (not variance `max|w| · σ²`). The point of the model is
//! that noise is a fixed fraction of the weight range, so a filter rescaled by
//! `c` sees noise rescaled by `c`.
//!
//! Laplace noise uses scale `b · max_j |w_j|` per filter. Device noise draws
//! each weight's std from a lookup table of the weight value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamSet;
use crate::rng::{laplace_inverse_cdf, RngStream};
use crate::tensor::l2_norm;

/// Piecewise-linear map from weight value to perturbation std, clamped at the
/// end knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceErrorModel {
    knots: Vec<(f64, f64)>,
}

impl DeviceErrorModel {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::domain("device table needs at least one knot"));
        }
        for (w, s) in &knots {
            if !w.is_finite() || !s.is_finite() || *s < 0.0 {
                return Err(Error::domain(format!("bad device knot ({w}, {s})")));
            }
        }
        if knots.windows(2).any(|p| p[1].0 <= p[0].0) {
            return Err(Error::domain(
                "device table weights must be strictly increasing",
            ));
        }
        Ok(Self { knots })
    }

    /// Two-column `weight,std` CSV; a non-numeric first line is taken as a header.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut knots = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 2 {
                return Err(Error::domain(format!(
                    "device table line {}: expected 2 columns",
                    i + 1
                )));
            }
            match (cols[0].parse::<f64>(), cols[1].parse::<f64>()) {
                (Ok(w), Ok(s)) => knots.push((w, s)),
                _ if i == 0 => continue,
                _ => {
                    return Err(Error::domain(format!(
                        "device table line {}: not numeric",
                        i + 1
                    )))
                }
            }
        }
        Self::new(knots)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn std_at(&self, w: f64) -> f64 {
        let k = &self.knots;
        if w <= k[0].0 {
            return k[0].1;
        }
        if w >= k[k.len() - 1].0 {
            return k[k.len() - 1].1;
        }
        let hi = k.partition_point(|(x, _)| *x <= w);
        let (x0, y0) = k[hi - 1];
        let (x1, y1) = k[hi];
        y0 + (y1 - y0) * (w - x0) / (x1 - x0)
    }

    /// Root-mean-square of the per-weight std over `params`; the expected
    /// whole-network RMSE of one device draw.
    pub fn expected_rmse(&self, params: &ParamSet) -> f64 {
        let n = params.len() as f64;
        (params.theta.iter().map(|w| self.std_at(*w).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// Table scaled so that [`expected_rmse`](Self::expected_rmse) on `params`
    /// equals `target`.
    pub fn calibrated_to_rmse(&self, params: &ParamSet, target: f64) -> Result<Self> {
        let current = self.expected_rmse(params);
        if current == 0.0 {
            return Err(Error::domain("cannot calibrate an all-zero device table"));
        }
        let scale = target / current;
        Self::new(self.knots.iter().map(|(w, s)| (*w, s * scale)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    Laplace,
    Device { table: DeviceErrorModel },
}

/// A perturbation distribution `Q` with its strength.
///
/// `strength` is σ for gaussian, b for laplace and a multiplier on the table
/// std for device noise. With `per_filter_scaling` off, gaussian and laplace
/// noise is plain isotropic (`N(0, σ²I)`), the form the bound and Taylor
/// checks use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub strength: f64,
    pub per_filter_scaling: bool,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            family: NoiseFamily::Gaussian,
            strength: sigma,
            per_filter_scaling: true,
        }
    }

    pub fn laplace(b: f64) -> Self {
        Self {
            family: NoiseFamily::Laplace,
            strength: b,
            per_filter_scaling: true,
        }
    }

    pub fn isotropic(sigma: f64) -> Self {
        Self {
            family: NoiseFamily::Gaussian,
            strength: sigma,
            per_filter_scaling: false,
        }
    }

    pub fn device(table: DeviceErrorModel, scale: f64) -> Self {
        Self {
            family: NoiseFamily::Device { table },
            strength: scale,
            per_filter_scaling: false,
        }
    }

    pub fn with_strength(&self, strength: f64) -> Self {
        Self {
            strength,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0) || !self.strength.is_finite() {
            return Err(Error::domain(format!(
                "noise strength must be finite and >= 0, got {}",
                self.strength
            )));
        }
        Ok(())
    }
}

/// Draws one perturbation vector for `params`.
///
/// Strength 0 returns exact zeros and consumes nothing from `rng`. Otherwise
/// one raw draw per parameter is consumed regardless of the weights, so
/// rescaling one filter leaves every other filter's draws untouched.
pub fn sample_noise(params: &ParamSet, spec: &NoiseSpec, rng: &mut RngStream) -> Result<Vec<f64>> {
    spec.validate()?;
    let k = params.len();
    let mut eps = vec![0.0; k];
    if spec.strength == 0.0 {
        return Ok(eps);
    }
    match &spec.family {
        NoiseFamily::Gaussian => {
            rng.fill_standard_normal(&mut eps);
            scale_per_filter(params, spec, &mut eps);
        }
        NoiseFamily::Laplace => {
            for e in eps.iter_mut() {
                *e = laplace_inverse_cdf(rng.uniform(), 1.0);
            }
            scale_per_filter(params, spec, &mut eps);
        }
        NoiseFamily::Device { table } => {
            for (e, w) in eps.iter_mut().zip(&params.theta) {
                let std = spec.strength * table.std_at(*w);
                *e = std * rng.standard_normal();
            }
        }
    }
    Ok(eps)
}

fn scale_per_filter(params: &ParamSet, spec: &NoiseSpec, eps: &mut [f64]) {
    if !spec.per_filter_scaling {
        eps.iter_mut().for_each(|e| *e *= spec.strength);
        return;
    }
    for slice in params.partition() {
        let scale = spec.strength * params.filter_max_abs(slice);
        eps[slice.range()].iter_mut().for_each(|e| *e *= scale);
    }
}

/// Elementwise Gaussian noise with std read from `model` at each weight.
pub fn device_noise(params: &ParamSet, model: &DeviceErrorModel, rng: &mut RngStream) -> Result<Vec<f64>> {
    sample_noise(params, &NoiseSpec::device(model.clone(), 1.0), rng)
}

/// `ρ · g / ‖g‖₂`; zero when `ρ` or `‖g‖₂` is zero.
pub fn sam_ascent(gradient: &[f64], rho: f64) -> Result<Vec<f64>> {
    if !(rho >= 0.0) {
        return Err(Error::domain(format!("rho must be >= 0, got {rho}")));
    }
    let norm = l2_norm(gradient);
    if rho == 0.0 || norm == 0.0 {
        return Ok(vec![0.0; gradient.len()]);
    }
    let scale = rho / norm;
    Ok(gradient.iter().map(|g| g * scale).collect())
}

/// Where the perturbed evaluation point `w + ε` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    None,
    /// SAM's normalised gradient-ascent step of length `rho`.
    Ascent { rho: f64 },
    /// One draw from a noise distribution.
    Random(NoiseSpec),
}

impl Perturbation {
    /// `ε` for the current point. `grad` is only read by the ascent kind.
    pub fn draw(&self, params: &ParamSet, grad: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        match self {
            Perturbation::None => Ok(vec![0.0; params.len()]),
            Perturbation::Ascent { rho } => sam_ascent(grad, *rho),
            Perturbation::Random(spec) => sample_noise(params, spec, rng),
        }
    }

    pub fn needs_gradient(&self) -> bool {
        matches!(self, Perturbation::Ascent { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Linear,
    Quadratic,
}

/// Warm-up of a perturbation strength (σ or ρ) from 0 to `max_strength` over
/// `warmup_iters` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub max_strength: f64,
    #[serde(default = "default_warmup")]
    pub warmup_iters: usize,
}

fn default_warmup() -> usize {
    1
}

impl Schedule {
    pub fn constant(max_strength: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            max_strength,
            warmup_iters: 1,
        }
    }

    pub fn quadratic(max_strength: f64, warmup_iters: usize) -> Self {
        Self {
            kind: ScheduleKind::Quadratic,
            max_strength,
            warmup_iters,
        }
    }

    pub fn linear(max_strength: f64, warmup_iters: usize) -> Self {
        Self {
            kind: ScheduleKind::Linear,
            max_strength,
            warmup_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_strength >= 0.0) || !self.max_strength.is_finite() {
            return Err(Error::domain(format!(
                "schedule max strength must be >= 0, got {}",
                self.max_strength
            )));
        }
        if self.kind != ScheduleKind::Constant && self.warmup_iters == 0 {
            return Err(Error::domain("warm-up schedules need warmup_iters >= 1"));
        }
        Ok(())
    }

    /// Variance-form strength `s_t²`:
    /// quadratic `s_max² (min(t,T*)/T*)²`, linear `s_max² min(t,T*)/T*`.
    pub fn variance_at(&self, t: usize) -> f64 {
        let max_sq = self.max_strength * self.max_strength;
        match self.kind {
            ScheduleKind::Constant => max_sq,
            ScheduleKind::Linear | ScheduleKind::Quadratic => {
                let ratio = t.min(self.warmup_iters) as f64 / self.warmup_iters as f64;
                match self.kind {
                    ScheduleKind::Quadratic => max_sq * (ratio * ratio),
                    _ => max_sq * ratio,
                }
            }
        }
    }

    /// Strength at iteration `t`, the square root of [`variance_at`](Self::variance_at).
    pub fn strength_at(&self, t: usize) -> f64 {
        if self.kind == ScheduleKind::Constant || t >= self.warmup_iters {
            return self.max_strength;
        }
        self.variance_at(t).sqrt()
    }
}
