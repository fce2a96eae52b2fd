//! Loss-landscape probes: m-sharpness, gradient cosine, path length,
//! Hutchinson Hessian trace and filter-normalised loss slices.
//!
//! Hessian-vector products are central differences of gradients, so the
//! differentiation core stays first order.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{ModelObjective, ModelSpec, ParamSet};
use crate::objective::Objective;
use crate::optim::cosine_similarity;
use crate::par;
use crate::perturb::{NoiseSpec, Perturbation};
use crate::rng::RngStream;
use crate::tensor::{all_finite, distance, dot, l2_norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionKind {
    Ascent,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessProbe {
    pub kind: DirectionKind,
    /// ρ for ascent, σ for average.
    pub magnitude: f64,
    pub m: usize,
    pub num_samples: usize,
    /// Average probes use per-filter scaled noise unless this is off.
    pub per_filter_scaling: bool,
}

impl SharpnessProbe {
    pub fn ascent(rho: f64, m: usize) -> Self {
        Self {
            kind: DirectionKind::Ascent,
            magnitude: rho,
            m,
            num_samples: 1,
            per_filter_scaling: true,
        }
    }

    pub fn average(sigma: f64, m: usize, num_samples: usize) -> Self {
        Self {
            kind: DirectionKind::Average,
            magnitude: sigma,
            m,
            num_samples,
            per_filter_scaling: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0) || !self.magnitude.is_finite() {
            return Err(Error::domain(format!("probe magnitude must be >= 0, got {}", self.magnitude)));
        }
        if self.m == 0 || self.num_samples == 0 {
            return Err(Error::domain("probe needs m >= 1 and num_samples >= 1"));
        }
        Ok(())
    }

    /// The optimizer-side perturbation this probe measures.
    pub fn perturbation(&self) -> Perturbation {
        match self.kind {
            DirectionKind::Ascent => Perturbation::Ascent { rho: self.magnitude },
            DirectionKind::Average => Perturbation::Random(NoiseSpec {
                per_filter_scaling: self.per_filter_scaling,
                ..NoiseSpec::gaussian(self.magnitude)
            }),
        }
    }
}

/// Mean over `objectives` (one per minibatch) of `L_b(w + ε) − L_b(w)`;
/// minibatch `b` draws from `rng.substream(b)`.
pub fn m_sharpness_over<O: Objective>(
    objectives: &[O],
    params: &ParamSet,
    probe: &SharpnessProbe,
    rng: &RngStream,
) -> Result<f64> {
    probe.validate()?;
    if objectives.is_empty() {
        return Err(Error::domain("m-sharpness needs at least one minibatch"));
    }
    if probe.magnitude == 0.0 {
        return Ok(0.0);
    }
    let pert = probe.perturbation();
    let per_batch = par::collect_results(par::map_indexed(objectives.len(), |b| -> Result<f64> {
        let obj = &objectives[b];
        let mut r = rng.substream(b as u64);
        let mut g = vec![0.0; params.len()];
        let base = obj.loss_and_grad(&params.theta, &mut g)?;
        let draws = match probe.kind {
            DirectionKind::Ascent => 1,
            DirectionKind::Average => probe.num_samples,
        };
        let mut acc = 0.0;
        let mut shifted = vec![0.0; params.len()];
        for _ in 0..draws {
            let eps = pert.draw(params, &g, &mut r)?;
            for ((s, w), e) in shifted.iter_mut().zip(&params.theta).zip(&eps) {
                *s = w + e;
            }
            acc += obj.loss(&shifted)? - base;
        }
        Ok(acc / draws as f64)
    }))?;
    Ok(per_batch.iter().sum::<f64>() / per_batch.len() as f64)
}

/// m-sharpness over consecutive size-`m` minibatches of `dataset`; a trailing
/// short batch is dropped unless it is the only one.
pub fn m_sharpness(
    model: &ModelSpec,
    params: &ParamSet,
    dataset: &Dataset,
    probe: &SharpnessProbe,
    smoothing: f64,
    rng: &RngStream,
) -> Result<f64> {
    probe.validate()?;
    if dataset.is_empty() {
        return Err(Error::domain("m-sharpness on an empty dataset"));
    }
    let mut batches = dataset.minibatches(probe.m);
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < probe.m) {
        batches.pop();
    }
    let objs: Vec<ModelObjective<'_>> = batches
        .iter()
        .map(|b| ModelObjective::new(model, b, smoothing))
        .collect();
    m_sharpness_over(&objs, params, probe, rng)
}

/// `cos∠(∇L(w), ∇L(w + ε))`; `None` when either gradient vanishes.
pub fn grad_cosine<O: Objective>(
    obj: &O,
    params: &ParamSet,
    perturbation: &Perturbation,
    rng: &mut RngStream,
) -> Result<Option<f64>> {
    let g0 = obj.grad(&params.theta)?;
    let eps = perturbation.draw(params, &g0, rng)?;
    let shifted: Vec<f64> = params.theta.iter().zip(&eps).map(|(w, e)| w + e).collect();
    let g1 = obj.grad(&shifted)?;
    Ok(cosine_similarity(&g0, &g1))
}

/// `Σ_t ‖w_{t+1} − w_t‖₂`.
pub fn path_distance(checkpoints: &[ParamSet]) -> Result<f64> {
    if checkpoints.len() < 2 {
        return Err(Error::domain("path distance needs at least two checkpoints"));
    }
    let k = checkpoints[0].len();
    if checkpoints.iter().any(|c| c.len() != k) {
        return Err(Error::Shape("checkpoints differ in parameter count".into()));
    }
    Ok(checkpoints.windows(2).map(|w| distance(&w[0].theta, &w[1].theta)).sum())
}

fn fd_step(theta: &[f64]) -> f64 {
    let rms = (dot(theta, theta) / theta.len().max(1) as f64).sqrt();
    1e-4 * rms.max(1.0)
}

/// `(∇L(w + h v) − ∇L(w − h v)) / 2h`.
pub fn hessian_vector<O: Objective>(obj: &O, theta: &[f64], v: &[f64], h: f64) -> Result<Vec<f64>> {
    let plus: Vec<f64> = theta.iter().zip(v).map(|(w, d)| w + h * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(w, d)| w - h * d).collect();
    let gp = obj.grad(&plus)?;
    let gm = obj.grad(&minus)?;
    let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    if !all_finite(&hv) {
        return Err(Error::NonFinite("Hessian-vector product".into()));
    }
    Ok(hv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub trace: f64,
    /// Standard error of the probe mean; 0 with a single probe.
    pub stderr: f64,
    pub probes: usize,
}

/// Hutchinson estimate of `tr ∇²L` from Rademacher probes; probe `i` comes
/// from `rng.substream(i)`, so two objectives sharing `rng` share probes.
pub fn hessian_trace<O: Objective>(obj: &O, theta: &[f64], probes: usize, rng: &RngStream) -> Result<TraceEstimate> {
    if probes == 0 {
        return Err(Error::domain("need at least one Hutchinson probe"));
    }
    let h = fd_step(theta);
    let quads = par::collect_results(par::map_indexed(probes, |i| -> Result<f64> {
        let mut r = rng.substream(i as u64);
        let z: Vec<f64> = (0..theta.len()).map(|_| r.rademacher()).collect();
        Ok(dot(&z, &hessian_vector(obj, theta, &z, h)?))
    }))?;
    let n = probes as f64;
    let mean = quads.iter().sum::<f64>() / n;
    let stderr = if probes > 1 {
        (quads.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate { trace: mean, stderr, probes })
}

/// Full symmetric Hessian by central differences, row-major `k × k`.
pub fn dense_hessian<O: Objective>(obj: &O, theta: &[f64]) -> Result<Vec<f64>> {
    let k = theta.len();
    let h = fd_step(theta);
    let cols = par::collect_results(par::map_indexed(k, |j| {
        let mut e = vec![0.0; k];
        e[j] = 1.0;
        hessian_vector(obj, theta, &e, h)
    }))?;
    let mut hess = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            hess[i * k + j] = 0.5 * (cols[j][i] + cols[i][j]);
        }
    }
    Ok(hess)
}

pub fn dense_hessian_trace<O: Objective>(obj: &O, theta: &[f64]) -> Result<f64> {
    let k = theta.len();
    let h = fd_step(theta);
    let diag = par::collect_results(par::map_indexed(k, |j| {
        let mut e = vec![0.0; k];
        e[j] = 1.0;
        hessian_vector(obj, theta, &e, h).map(|c| c[j])
    }))?;
    Ok(diag.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSliceSpec {
    /// 1 or 2.
    pub direction_count: usize,
    /// Points per axis; odd and ≥ 3.
    pub grid: usize,
    /// Axis range is `[-extent, extent]`.
    pub extent: f64,
    pub filter_normalized: bool,
}

impl LossSliceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.direction_count) {
            return Err(Error::domain("loss slices need 1 or 2 directions"));
        }
        if self.grid < 3 || self.grid.is_multiple_of(2) {
            return Err(Error::domain(format!("grid must be odd and >= 3, got {}", self.grid)));
        }
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return Err(Error::domain("slice extent must be > 0"));
        }
        Ok(())
    }

    /// Symmetric axis with an exact 0 at the centre.
    pub fn axis(&self) -> Vec<f64> {
        let half = (self.grid / 2) as f64;
        (0..self.grid)
            .map(|i| self.extent * (i as f64 - half) / half)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSlice {
    pub alphas: Vec<f64>,
    /// `[0.0]` for one-direction slices.
    pub betas: Vec<f64>,
    /// Row-major over (alpha, beta).
    pub losses: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
}

impl LossSlice {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,loss\n");
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                let _ = writeln!(out, "{a},{b},{}", self.losses[i * self.betas.len() + j]);
            }
        }
        out
    }
}

/// Gaussian direction with every filter slice rescaled to the norm of the
/// matching slice of `w` (zero where `w`'s slice is zero).
pub fn filter_normalized_direction(params: &ParamSet, rng: &mut RngStream) -> Vec<f64> {
    let mut d = vec![0.0; params.len()];
    rng.fill_standard_normal(&mut d);
    for slice in params.partition() {
        let r = slice.range();
        let target = l2_norm(&params.theta[r.clone()]);
        let norm = l2_norm(&d[r.clone()]);
        let scale = if norm > 0.0 { target / norm } else { 0.0 };
        d[r].iter_mut().for_each(|x| *x *= scale);
    }
    d
}

/// `L(w + α d₁ + β d₂)` over the grid; the centre cell is `L(w)` exactly.
pub fn loss_slice<O: Objective>(obj: &O, params: &ParamSet, spec: &LossSliceSpec, rng: &mut RngStream) -> Result<LossSlice> {
    spec.validate()?;
    let directions: Vec<Vec<f64>> = (0..spec.direction_count)
        .map(|_| {
            if spec.filter_normalized {
                filter_normalized_direction(params, rng)
            } else {
                let mut d = vec![0.0; params.len()];
                rng.fill_standard_normal(&mut d);
                d
            }
        })
        .collect();
    let alphas = spec.axis();
    let betas = if spec.direction_count == 2 { spec.axis() } else { vec![0.0] };
    let nb = betas.len();
    let losses = par::collect_results(par::map_indexed(alphas.len() * nb, |idx| {
        let (a, b) = (alphas[idx / nb], betas[idx % nb]);
        let theta: Vec<f64> = (0..params.len())
            .map(|j| {
                let mut w = params.theta[j];
                if a != 0.0 {
                    w += a * directions[0][j];
                }
                if b != 0.0 {
                    w += b * directions[1][j];
                }
                w
            })
            .collect();
        obj.loss(&theta)
    }))?;
    Ok(LossSlice {
        alphas,
        betas,
        losses,
        directions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{FilterSlice, SliceKind};
    use crate::objective::{Linear, Quadratic, Sum};
    use crate::rng::StreamId;

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, StreamId::NoiseEval)
    }

    #[test]
    fn ascent_on_w_squared() {
        let q = Quadratic::diagonal(&[2.0]);
        let p = ParamSet::single_filter(vec![1.0]);
        let s = m_sharpness_over(&[&q], &p, &SharpnessProbe::ascent(0.1, 1), &rng(0)).unwrap();
        assert!((s - 0.21).abs() < 1e-12);
        let z = m_sharpness_over(&[&q], &p, &SharpnessProbe::ascent(0.0, 1), &rng(0)).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn average_on_w_squared() {
        let q = Quadratic::diagonal(&[2.0]);
        let p = ParamSet::single_filter(vec![1.0]);
        let s = m_sharpness_over(&[&q], &p, &SharpnessProbe::average(0.1, 1, 100_000), &rng(1)).unwrap();
        assert!((s - 0.01).abs() < 0.05 * 0.01, "{s}");
    }

    #[test]
    fn ascent_closed_form_on_diagonal_quadratic() {
        // L = ½ Σ a_i w_i²: L(w + ρ ĝ) − L(w) = ρ‖g‖ + ½ρ² ĝᵀAĝ.
        let a = [1.0, 4.0, 0.5];
        let w = [0.3, -0.2, 1.0];
        let q = Quadratic::diagonal(&a);
        let g: Vec<f64> = a.iter().zip(&w).map(|(a, w)| a * w).collect();
        let gn = l2_norm(&g);
        let rho = 0.05;
        let quad: f64 = a.iter().zip(&g).map(|(a, g)| a * (g / gn) * (g / gn)).sum();
        let expected = rho * gn + 0.5 * rho * rho * quad;
        let p = ParamSet::single_filter(w.to_vec());
        let s = m_sharpness_over(&[&q], &p, &SharpnessProbe::ascent(rho, 1), &rng(0)).unwrap();
        assert!((s - expected).abs() < 1e-14);
        assert!(s >= rho * gn);
    }

    #[test]
    fn cosine_cases() {
        let q = Quadratic::diagonal(&[2.0]);
        let p = ParamSet::single_filter(vec![1.0]);
        let mut r = rng(0);
        assert_eq!(grad_cosine(&q, &p, &Perturbation::None, &mut r).unwrap(), Some(1.0));
        let c = grad_cosine(&q, &p, &Perturbation::Ascent { rho: 0.5 }, &mut r).unwrap();
        assert_eq!(c, Some(1.0));
        let zero = ParamSet::single_filter(vec![0.0]);
        assert_eq!(grad_cosine(&q, &zero, &Perturbation::None, &mut r).unwrap(), None);
    }

    #[test]
    fn path_distance_cases() {
        let a = ParamSet::single_filter(vec![0.0, 0.0, 1.0]);
        let b = ParamSet::single_filter(vec![3.0, 4.0, 1.0]);
        assert_eq!(path_distance(&[a.clone(), a.clone()]).unwrap(), 0.0);
        assert_eq!(path_distance(&[a.clone(), b]).unwrap(), 5.0);
        assert!(path_distance(&[a]).is_err());
    }

    #[test]
    fn hutchinson_on_diagonal_quadratic() {
        let q = Quadratic::diagonal(&[1.0, 2.0, 3.0]);
        let t = hessian_trace(&q, &[0.5, -0.1, 0.2], 1000, &rng(4)).unwrap();
        assert!((t.trace - 6.0).abs() < 0.02 * 6.0);
    }

    #[test]
    fn hutchinson_on_linear_is_zero() {
        let l = Linear {
            coef: vec![1.0, -2.0, 0.5],
            offset: 0.3,
        };
        let t = hessian_trace(&l, &[0.1, 0.2, 0.3], 50, &rng(4)).unwrap();
        assert!(t.trace.abs() < 1e-6);
    }

    #[test]
    fn hutchinson_is_linear_with_shared_probes() {
        let a = Quadratic::new(2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let b = Quadratic::diagonal(&[0.3, 4.0]).with_center(vec![1.0, -1.0]);
        let theta = [0.4, 0.7];
        let r = rng(9);
        let ta = hessian_trace(&a, &theta, 20, &r).unwrap().trace;
        let tb = hessian_trace(&b, &theta, 20, &r).unwrap().trace;
        let tab = hessian_trace(&Sum(&a, &b), &theta, 20, &r).unwrap().trace;
        assert!((tab - (ta + tb)).abs() < 1e-10);
    }

    #[test]
    fn dense_hessian_of_quadratic() {
        let q = Quadratic::new(2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let h = dense_hessian(&q, &[0.3, -0.3]).unwrap();
        for (got, want) in h.iter().zip([2.0, 0.5, 0.5, 1.0]) {
            assert!((got - want).abs() < 1e-8);
        }
        assert!((dense_hessian_trace(&q, &[0.3, -0.3]).unwrap() - 3.0).abs() < 1e-8);
    }

    fn two_slices() -> ParamSet {
        ParamSet::new(
            vec![1.0, 2.0, 2.0, 0.0, 0.5],
            vec![
                FilterSlice {
                    offset: 0,
                    length: 3,
                    kind: SliceKind::WeightFilter,
                    layer: 0,
                },
                FilterSlice {
                    offset: 3,
                    length: 2,
                    kind: SliceKind::Bias,
                    layer: 0,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn slice_directions_match_filter_norms() {
        let p = two_slices();
        let d = filter_normalized_direction(&p, &mut rng(2));
        for s in p.partition() {
            let r = s.range();
            assert!((l2_norm(&d[r.clone()]) - l2_norm(&p.theta[r])).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_centre_and_symmetry() {
        let p = two_slices();
        let q = Quadratic::diagonal(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let spec = LossSliceSpec {
            direction_count: 2,
            grid: 5,
            extent: 1.0,
            filter_normalized: true,
        };
        let s = loss_slice(&q, &p, &spec, &mut rng(3)).unwrap();
        assert_eq!(s.losses[2 * 5 + 2], q.loss(&p.theta).unwrap());

        // A quadratic centred at w is even along any line through w.
        let even = q.clone().with_center(p.theta.clone());
        let spec1 = LossSliceSpec {
            direction_count: 1,
            ..spec
        };
        let s = loss_slice(&even, &p, &spec1, &mut rng(3)).unwrap();
        for i in 0..5 {
            assert!((s.losses[i] - s.losses[4 - i]).abs() < 1e-10);
        }
        assert_eq!(s.to_csv().lines().count(), 6);
    }

    #[test]
    fn slice_spec_rejects_even_grid() {
        let spec = LossSliceSpec {
            direction_count: 1,
            grid: 4,
            extent: 1.0,
            filter_normalized: true,
        };
        assert!(spec.validate().is_err());
    }
}
