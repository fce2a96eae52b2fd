//! Noisy-inference evaluation: accuracy under K whole-model noise draws for
//! each of S trained weight sets, summarised as `mean ± noise_std ± weight_std`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{ModelSpec, ParamSet};
use crate::par;
use crate::perturb::{sample_noise, NoiseSpec};
use crate::rng::RngStream;
use crate::tensor::add_into;

/// Default number of noise draws per trained model.
pub const DEFAULT_DRAWS: usize = 10;
/// Default number of independently trained models.
pub const DEFAULT_SEEDS: usize = 3;

/// Summary of an `S x K` accuracy grid.
///
/// `noise_std` is the mean over seeds of each seed's sample std across its K
/// draws; `weight_std` is the sample std across seeds of the per-seed means.
/// Both use the `n - 1` divisor and are 0 when their axis has one entry.
/// `weight_std` is `None` when only one checkpoint was evaluated by design
/// (single-checkpoint mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_acc: f64,
    pub noise_std: f64,
    pub weight_std: Option<f64>,
    pub per_cell: Vec<Vec<f64>>,
    pub sigma_test: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
}

impl EvalReport {
    /// `"mean ± noise ± weight"` in percent with two decimals.
    pub fn format_pm(&self) -> String {
        let mut s = format!("{:.2} ± {:.2}", 100.0 * self.mean_acc, 100.0 * self.noise_std);
        match self.weight_std {
            Some(w) => s.push_str(&format!(" ± {:.2}", 100.0 * w)),
            None => s.push_str(" ± n/a"),
        }
        s
    }
}

/// Accuracy of `params + ε` for one draw, and that draw's weight RMSE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyDraw {
    pub accuracy: f64,
    pub rmse: f64,
}

/// K draws, each from `rng.substream(k)`, each covering every parameter and
/// the whole dataset. `params` is never modified.
pub fn noisy_draws(
    model: &ModelSpec,
    params: &ParamSet,
    dataset: &Dataset,
    spec: &NoiseSpec,
    draws: usize,
    rng: &RngStream,
) -> Result<Vec<NoisyDraw>> {
    if draws == 0 {
        return Err(Error::domain("need at least one noise draw"));
    }
    let results = par::map_indexed(draws, |k| -> Result<NoisyDraw> {
        let mut r = rng.substream(k as u64);
        let eps = sample_noise(params, spec, &mut r)?;
        let mut theta = vec![0.0; params.len()];
        add_into(&params.theta, &eps, &mut theta);
        let accuracy = model.accuracy(&theta, &[&dataset.data])?;
        let rmse = (eps.iter().map(|e| e * e).sum::<f64>() / eps.len() as f64).sqrt();
        Ok(NoisyDraw { accuracy, rmse })
    });
    par::collect_results(results)
}

pub fn noisy_accuracy(
    model: &ModelSpec,
    params: &ParamSet,
    dataset: &Dataset,
    spec: &NoiseSpec,
    draws: usize,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    Ok(noisy_draws(model, params, dataset, spec, draws, rng)?
        .into_iter()
        .map(|d| d.accuracy)
        .collect())
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Reduces an `S x K` grid of accuracies.
pub fn aggregate(per_cell: &[Vec<f64>]) -> Result<EvalReport> {
    let k = per_cell.first().map_or(0, Vec::len);
    if k == 0 || per_cell.iter().any(|r| r.len() != k) {
        return Err(Error::domain("accuracy grid must be non-empty and rectangular"));
    }
    let s = per_cell.len();
    let seed_means: Vec<f64> = per_cell
        .iter()
        .map(|r| r.iter().sum::<f64>() / k as f64)
        .collect();
    let mean_acc = per_cell.iter().flatten().sum::<f64>() / (s * k) as f64;
    let noise_std = per_cell.iter().map(|r| sample_std(r)).sum::<f64>() / s as f64;
    Ok(EvalReport {
        mean_acc,
        noise_std,
        weight_std: Some(sample_std(&seed_means)),
        per_cell: per_cell.to_vec(),
        sigma_test: 0.0,
        rmse: None,
    })
}

/// Runs the full protocol: every checkpoint (seed `s`) under `draws` noise
/// realisations from `rng.substream(s).substream(k)`.
pub fn evaluate_grid(
    model: &ModelSpec,
    checkpoints: &[ParamSet],
    dataset: &Dataset,
    spec: &NoiseSpec,
    draws: usize,
    rng: &RngStream,
) -> Result<EvalReport> {
    if checkpoints.is_empty() {
        return Err(Error::domain("need at least one checkpoint"));
    }
    let rows = par::collect_results(par::map_indexed(checkpoints.len(), |s| {
        noisy_draws(model, &checkpoints[s], dataset, spec, draws, &rng.substream(s as u64))
    }))?;
    let per_cell: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|d| d.accuracy).collect())
        .collect();
    let mut report = aggregate(&per_cell)?;
    report.sigma_test = spec.strength;
    let n = (checkpoints.len() * draws) as f64;
    let ms = rows.iter().flatten().map(|d| d.rmse * d.rmse).sum::<f64>() / n;
    report.rmse = Some(ms.sqrt());
    Ok(report)
}

/// `sqrt(mean_j (a_j - b_j)²)` over every coordinate.
pub fn weight_rmse(clean: &ParamSet, perturbed: &ParamSet) -> Result<f64> {
    if clean.partition() != perturbed.partition() {
        return Err(Error::Shape("parameter sets have different partitions".into()));
    }
    let n = clean.len() as f64;
    let ss: f64 = clean
        .theta
        .iter()
        .zip(&perturbed.theta)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / n).sqrt())
}

/// Plain-text table, one row per report: `sigma_test | mean ± noise ± weight`.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("sigma_test | accuracy (%)\n-----------+------------------------\n");
    for r in reports {
        out.push_str(&format!("{:>10} | {}\n", r.sigma_test, r.format_pm()));
    }
    out
}
