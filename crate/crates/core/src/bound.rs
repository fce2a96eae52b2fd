//! Perturbed PAC-Bayes bound and its second-order Taylor identity.
//!
//! ```text
//! E_ε L_D(w+ε) ≤ E_ε L_S(w+ε) + h,   ε ~ N(0, σ² I)
//! h = sqrt( ((k/4) ln(1 + ‖w‖²/(kσ²)) + 1/4 + ln(n/δ) + 2 ln(6n + 3k)) / (n − 1) )
//! E_ε L(w+ε) ≈ L(w) + σ²/2 · tr ∇²L(w)
//! ```
//!
//! Expectations are Monte Carlo over antithetic pairs `(z, −z)`, which cancels
//! every odd-order term of the expansion exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamSet;
use crate::objective::Objective;
use crate::par;
use crate::rng::RngStream;
use crate::sharpness::{dense_hessian_trace, hessian_trace};
use crate::tensor::dot;

const CHUNK_PAIRS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub k: usize,
    pub n: usize,
    pub delta: f64,
    pub w_norm_sq: f64,
    pub sigma: f64,
}

impl BoundInputs {
    pub fn for_params(theta: &[f64], n: usize, delta: f64, sigma: f64) -> Self {
        Self {
            k: theta.len(),
            n,
            delta,
            w_norm_sq: dot(theta, theta),
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::domain("k must be >= 1"));
        }
        if self.n < 2 {
            return Err(Error::domain(format!("n must be >= 2, got {}", self.n)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::domain(format!("delta must be in (0,1), got {}", self.delta)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::domain(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.w_norm_sq >= 0.0) || !self.w_norm_sq.is_finite() {
            return Err(Error::domain("weight norm must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Complexity term of the perturbed bound, natural logarithms throughout.
pub fn h_term(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let k = inp.k as f64;
    let n = inp.n as f64;
    let kl = 0.25 * k * (inp.w_norm_sq / (k * inp.sigma * inp.sigma)).ln_1p();
    let num = kl + 0.25 + (n / inp.delta).ln() + 2.0 * (6.0 * n + 3.0 * k).ln();
    Ok((num / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McDesign {
    /// Independent antithetic pairs.
    Antithetic,
    /// Antithetic pairs with every coordinate's draws rescaled so their
    /// empirical second moment is exactly 1; removes the σ² sampling error on
    /// separable losses.
    MomentMatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// `N(0, σ² I)`.
    Isotropic,
    /// Per-coordinate std `σ · max|w_f|` of the enclosing filter.
    PerFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Standard error treating pair means as independent.
    pub stderr: f64,
    pub pairs: usize,
}

fn coordinate_scale(params: &ParamSet, sigma: f64, mode: NoiseMode) -> Vec<f64> {
    let mut s = vec![sigma; params.len()];
    if mode == NoiseMode::PerFilter {
        for slice in params.partition() {
            let m = params.filter_max_abs(slice);
            s[slice.range()].iter_mut().for_each(|x| *x *= m);
        }
    }
    s
}

fn chunk_len(c: usize, pairs: usize) -> usize {
    CHUNK_PAIRS.min(pairs - c * CHUNK_PAIRS)
}

/// `E_ε L(w + ε)` from `ceil(samples / 2)` antithetic pairs; chunk `c` of 512
/// pairs draws from `rng.substream(c)`.
pub fn expected_perturbed_loss<O: Objective>(
    obj: &O,
    params: &ParamSet,
    sigma: f64,
    samples: usize,
    mode: NoiseMode,
    design: McDesign,
    rng: &RngStream,
) -> Result<McEstimate> {
    if samples == 0 {
        return Err(Error::domain("need at least one Monte Carlo sample"));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma must be >= 0, got {sigma}")));
    }
    let k = params.len();
    let pairs = samples.div_ceil(2);
    if sigma == 0.0 {
        return Ok(McEstimate {
            mean: obj.loss(&params.theta)?,
            stderr: 0.0,
            pairs,
        });
    }
    let chunks = pairs.div_ceil(CHUNK_PAIRS);
    let mut scale = coordinate_scale(params, sigma, mode);

    if design == McDesign::MomentMatched {
        let partial = par::map_indexed(chunks, |c| {
            let mut r = rng.substream(c as u64);
            let mut sq = vec![0.0; k];
            let mut z = vec![0.0; k];
            for _ in 0..chunk_len(c, pairs) {
                r.fill_standard_normal(&mut z);
                sq.iter_mut().zip(&z).for_each(|(s, v)| *s += v * v);
            }
            sq
        });
        let mut total = vec![0.0; k];
        for p in &partial {
            total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
        }
        for (s, t) in scale.iter_mut().zip(&total) {
            if *t > 0.0 {
                *s *= (pairs as f64 / t).sqrt();
            }
        }
    }

    let values = par::collect_results(par::map_indexed(chunks, |c| -> Result<Vec<f64>> {
        let mut r = rng.substream(c as u64);
        let mut z = vec![0.0; k];
        let mut plus = vec![0.0; k];
        let mut minus = vec![0.0; k];
        let mut out = Vec::with_capacity(chunk_len(c, pairs));
        for _ in 0..chunk_len(c, pairs) {
            r.fill_standard_normal(&mut z);
            for j in 0..k {
                let e = scale[j] * z[j];
                plus[j] = params.theta[j] + e;
                minus[j] = params.theta[j] - e;
            }
            out.push(0.5 * (obj.loss(&plus)? + obj.loss(&minus)?));
        }
        Ok(out)
    }))?;
    let values: Vec<f64> = values.into_iter().flatten().collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate { mean, stderr, pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub perturbed_loss: f64,
    pub mc_stderr: f64,
    pub h: f64,
    pub total: f64,
}

/// `E_ε L_S(w+ε) + h` with isotropic ε at `inp.sigma`.
pub fn bound_rhs<O: Objective>(
    obj: &O,
    params: &ParamSet,
    inp: &BoundInputs,
    samples: usize,
    rng: &RngStream,
) -> Result<BoundReport> {
    let h = h_term(inp)?;
    let est = expected_perturbed_loss(
        obj,
        params,
        inp.sigma,
        samples,
        NoiseMode::Isotropic,
        McDesign::Antithetic,
        rng,
    )?;
    Ok(BoundReport {
        inputs: *inp,
        perturbed_loss: est.mean,
        mc_stderr: est.stderr,
        h,
        total: est.mean + h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum TraceMethod {
    Hutchinson { probes: usize },
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub sigma: f64,
    pub loss: f64,
    pub trace: f64,
    /// Monte Carlo `E L(w+ε)`.
    pub lhs: f64,
    /// `L(w) + σ²/2 · tr H`.
    pub rhs: f64,
    pub gap: f64,
    pub mc_stderr: f64,
}

impl TaylorReport {
    /// `σ²/2 · tr H`, the scale the gap is judged against.
    pub fn second_order_term(&self) -> f64 {
        0.5 * self.sigma * self.sigma * self.trace
    }
}

/// Compares the Monte Carlo expectation with its second-order expansion
/// under isotropic noise. The trace uses `rng.substream(u64::MAX)`.
pub fn taylor_check<O: Objective>(
    obj: &O,
    params: &ParamSet,
    sigma: f64,
    samples: usize,
    method: TraceMethod,
    design: McDesign,
    rng: &RngStream,
) -> Result<TaylorReport> {
    let loss = obj.loss(&params.theta)?;
    let trace = match method {
        TraceMethod::Dense => dense_hessian_trace(obj, &params.theta)?,
        TraceMethod::Hutchinson { probes } => {
            hessian_trace(obj, &params.theta, probes, &rng.substream(u64::MAX))?.trace
        }
    };
    let est = expected_perturbed_loss(obj, params, sigma, samples, NoiseMode::Isotropic, design, rng)?;
    let rhs = loss + 0.5 * sigma * sigma * trace;
    Ok(TaylorReport {
        sigma,
        loss,
        trace,
        lhs: est.mean,
        rhs,
        gap: (est.mean - rhs).abs(),
        mc_stderr: est.stderr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub sigmas: Vec<f64>,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// `ordered[i]`: the loss at `sigmas[i+1]` exceeds the one at `sigmas[i]`
    /// by more than twice the combined standard error.
    pub ordered: Vec<bool>,
}

impl MonotoneReport {
    pub fn all_ordered(&self) -> bool {
        self.ordered.iter().all(|o| *o)
    }
}

/// Expected perturbed loss along an ascending list of σ, with common random
/// numbers across σ.
pub fn monotone_sigma_check<O: Objective>(
    obj: &O,
    params: &ParamSet,
    sigmas: &[f64],
    samples: usize,
    mode: NoiseMode,
    rng: &RngStream,
) -> Result<MonotoneReport> {
    if sigmas.is_empty() {
        return Err(Error::domain("need at least one sigma"));
    }
    if sigmas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("sigmas must be strictly ascending"));
    }
    let mut means = Vec::with_capacity(sigmas.len());
    let mut stderrs = Vec::with_capacity(sigmas.len());
    for s in sigmas {
        let e = expected_perturbed_loss(obj, params, *s, samples, mode, McDesign::Antithetic, rng)?;
        means.push(e.mean);
        stderrs.push(e.stderr);
    }
    let ordered = (1..sigmas.len())
        .map(|i| {
            let se = (stderrs[i - 1].powi(2) + stderrs[i].powi(2)).sqrt();
            means[i] - means[i - 1] > 2.0 * se
        })
        .collect();
    Ok(MonotoneReport {
        sigmas: sigmas.to_vec(),
        means,
        stderrs,
        ordered,
    })
}
