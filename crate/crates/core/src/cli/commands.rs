//! `train`, `eval`, `sweep` and `report`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{eval_set, val_set, ExperimentConfig, SweepConfig};
use super::metrics::{
    read_metrics, render_csv, write_file, write_metrics, RunManifest, CONFIG_SNAPSHOT, MANIFEST_FILE, METRICS_FILE,
};
use crate::bound::{bound_rhs, taylor_check, BoundInputs, BoundReport, McDesign, TaylorReport, TraceMethod};
use crate::checkpoint;
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::evalharness::{evaluate_grid, render_table, EvalReport};
use crate::network::{ModelObjective, ModelSpec, ParamSet};
use crate::optim::{train, MetricsRecord, TrainConfig, TrainOutcome};
use crate::par;
use crate::rng::{RngStream, StreamId};
use crate::sharpness::{loss_slice, LossSliceSpec};

pub const BEST_CKPT: &str = "best.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const INIT_CKPT: &str = "init.ckpt";

pub fn seed_dir(run: &Path, s: usize) -> PathBuf {
    run.join(format!("seed-{s}"))
}

pub fn best_for_sigma(sigma: f64) -> String {
    format!("best-sigma-{sigma}.ckpt")
}

/// Weight seed `s` of a run: the base seed shifted by `s`.
pub fn seed_config(train: &TrainConfig, s: usize) -> TrainConfig {
    TrainConfig {
        seed: train.seed.wrapping_add(s as u64),
        ..train.clone()
    }
}

/// Noise for evaluation at `sigma`, independent of list position.
pub fn eval_rng(cfg: &ExperimentConfig, sigma: f64) -> RngStream {
    RngStream::new(cfg.train.seed, StreamId::NoiseEval).substream(sigma.to_bits())
}

/// Trains `seeds` replicas of `train` and writes each to `run/seed-<s>/`.
pub fn train_seeds(
    model: &ModelSpec,
    train_cfg: &TrainConfig,
    splits: &Splits,
    seeds: usize,
    run: &Path,
    config_hash: &str,
) -> Result<Vec<TrainOutcome>> {
    let outcomes = par::collect_results(par::map_indexed(seeds, |s| {
        train(model, &splits.train, val_set(splits), &seed_config(train_cfg, s))
    }))?;
    for (s, out) in outcomes.iter().enumerate() {
        let dir = seed_dir(run, s);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        checkpoint::save(&dir.join(INIT_CKPT), model, &out.initial, config_hash)?;
        checkpoint::save(&dir.join(BEST_CKPT), model, out.best(), config_hash)?;
        checkpoint::save(&dir.join(FINAL_CKPT), model, &out.final_params, config_hash)?;
        for (sigma, p) in train_cfg.monitor_sigmas.iter().zip(&out.best) {
            checkpoint::save(&dir.join(best_for_sigma(*sigma)), model, p, config_hash)?;
        }
        write_metrics(&dir.join(METRICS_FILE), &out.log)?;
    }
    Ok(outcomes)
}

fn write_snapshot(cfg: &ExperimentConfig, run: &Path) -> Result<()> {
    let mut text = format!("# config_hash = \"{}\"\n", cfg.hash());
    text.push_str(&cfg.to_toml()?);
    write_file(&run.join(CONFIG_SNAPSHOT), text)
}

fn list_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = fs::read_dir(&d) else { continue };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(rel) = p.strip_prefix(root) {
                out.push(rel.to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub logs: Vec<Vec<MetricsRecord>>,
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let run = cfg.resolved_output_dir();
    let hash = cfg.hash();
    let splits = cfg.load_splits()?;
    let outcomes = train_seeds(&cfg.model, &cfg.train, &splits, cfg.eval.seeds, &run, &hash)?;
    write_snapshot(cfg, &run)?;
    let mut manifest = RunManifest::new("train", &hash);
    manifest.files = list_files(&run);
    manifest.write(&run.join(MANIFEST_FILE))?;
    Ok(TrainSummary {
        run_dir: run,
        config_hash: hash,
        logs: outcomes.into_iter().map(|o| o.log).collect(),
    })
}

pub fn cmd_train(config_path: &Path) -> Result<TrainSummary> {
    run_train(&ExperimentConfig::load(config_path)?)
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub sigma_test: Option<Vec<f64>>,
    pub draws: Option<usize>,
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub config_hash: String,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<EvalReport>,
}

fn find_snapshot(start: &Path) -> Option<PathBuf> {
    start
        .ancestors()
        .take(3)
        .map(|d| d.join(CONFIG_SNAPSHOT))
        .find(|p| p.is_file())
}

fn seed_dirs(run: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<(usize, PathBuf)> = fs::read_dir(run)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let idx = name.strip_prefix("seed-")?.parse().ok()?;
            e.path().is_dir().then(|| (idx, e.path()))
        })
        .collect();
    dirs.sort();
    dirs.into_iter().map(|(_, p)| p).collect()
}

/// Runs the evaluation protocol over one checkpoint file or over every
/// `seed-*` replica of a run directory.
pub fn run_eval(args: &EvalArgs) -> Result<(EvalOutput, PathBuf)> {
    let ckpt = &args.checkpoint;
    if !ckpt.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let cfg_path = match &args.config {
        Some(p) => p.clone(),
        None => find_snapshot(if ckpt.is_dir() { ckpt } else { ckpt.parent().unwrap_or(Path::new(".")) })
            .ok_or_else(|| Error::Config(format!("no {CONFIG_SNAPSHOT} near {}; pass --config", ckpt.display())))?,
    };
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let sigmas = args.sigma_test.clone().unwrap_or_else(|| cfg.eval.sigma_test.clone());
    let draws = args.draws.unwrap_or(cfg.eval.draws);
    if sigmas.is_empty() || sigmas.iter().any(|s| !(*s >= 0.0)) || draws == 0 {
        return Err(Error::Config("need sigma_test values >= 0 and draws >= 1".into()));
    }
    let splits = cfg.load_splits()?;
    let data = eval_set(&splits);

    let single = ckpt.is_file();
    let dirs = if single { Vec::new() } else { seed_dirs(ckpt) };
    if !single && dirs.is_empty() {
        return Err(Error::Config(format!("{} has no seed-* checkpoints", ckpt.display())));
    }
    let mut used = Vec::new();
    let mut reports = Vec::with_capacity(sigmas.len());
    for sigma in &sigmas {
        let paths: Vec<PathBuf> = if single {
            vec![ckpt.clone()]
        } else {
            dirs.iter()
                .map(|d| {
                    let per_sigma = d.join(best_for_sigma(*sigma));
                    if per_sigma.is_file() {
                        per_sigma
                    } else {
                        d.join(BEST_CKPT)
                    }
                })
                .collect()
        };
        let mut params = Vec::with_capacity(paths.len());
        for p in &paths {
            let (m, ps) = checkpoint::load(p)?;
            if m != cfg.model {
                return Err(Error::Config(format!("{} does not match the configured model", p.display())));
            }
            params.push(ps);
        }
        let spec = cfg.train.noise_spec(*sigma);
        let mut report = evaluate_grid(&cfg.model, &params, data, &spec, draws, &eval_rng(&cfg, *sigma))?;
        if single {
            report.weight_std = None;
        }
        reports.push(report);
        used.extend(paths);
    }
    used.sort();
    used.dedup();
    let out_path = if single {
        let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        ckpt.with_file_name(format!("eval-{stem}.json"))
    } else {
        ckpt.join("eval.json")
    };
    let output = EvalOutput {
        config_hash: cfg.hash(),
        checkpoints: used,
        reports,
    };
    write_file(&out_path, serde_json::to_vec_pretty(&output)?)?;
    write_file(&out_path.with_extension("txt"), render_table(&output.reports))?;
    Ok((output, out_path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub row: usize,
    pub strength: f64,
    pub warmup: usize,
    pub sigma_test: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config_hash: String,
    pub rows: Vec<(f64, usize)>,
    pub sigma_test: Vec<f64>,
    /// Row-major `rows × sigma_test`.
    pub cells: Vec<SweepCell>,
    /// Per column, the row with the highest mean accuracy.
    pub best_row: Vec<Option<usize>>,
    /// Cells computed in this invocation (the rest were resumed).
    pub computed: usize,
}

impl SweepSummary {
    pub fn cell(&self, row: usize, col: usize) -> &SweepCell {
        &self.cells[row * self.sigma_test.len() + col]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellFile {
    config_hash: String,
    row_config_hash: String,
    cell: SweepCell,
}

pub fn row_dir(out: &Path, row: usize) -> PathBuf {
    out.join("sweep").join(format!("row-{row}"))
}

pub fn cell_path(out: &Path, row: usize, sigma: f64) -> PathBuf {
    row_dir(out, row).join(format!("sigma-{sigma}")).join("report.json")
}

fn row_config(cfg: &ExperimentConfig, sweep: &SweepConfig, strength: f64, warmup: usize) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.sweep = None;
    c.train.schedule = sweep.schedule(strength, warmup);
    let mut monitor = cfg.eval.sigma_test.clone();
    monitor.sort_by(f64::total_cmp);
    monitor.dedup();
    c.train.monitor_sigmas = monitor;
    c
}

fn load_row_checkpoints(dir: &Path, seeds: usize, sigmas: &[f64]) -> Option<Vec<Vec<ParamSet>>> {
    (0..seeds)
        .map(|s| {
            sigmas
                .iter()
                .map(|sigma| checkpoint::load(&seed_dir(dir, s).join(best_for_sigma(*sigma))).ok().map(|(_, p)| p))
                .collect::<Option<Vec<_>>>()
        })
        .collect()
}

fn sweep_row(
    cfg: &ExperimentConfig,
    sweep: &SweepConfig,
    splits: &Splits,
    out: &Path,
    row: usize,
    resume: bool,
) -> Vec<(SweepCell, bool)> {
    let (strength, warmup) = sweep.rows()[row];
    let rc = row_config(cfg, sweep, strength, warmup);
    let row_hash = rc.hash();
    let sigmas = &cfg.eval.sigma_test;
    let blank = |col: usize| SweepCell {
        row,
        strength,
        warmup,
        sigma_test: sigmas[col],
        report: None,
        error: None,
    };

    let mut done: Vec<Option<SweepCell>> = sigmas
        .iter()
        .map(|sigma| {
            if !resume {
                return None;
            }
            let bytes = fs::read(cell_path(out, row, *sigma)).ok()?;
            let f: CellFile = serde_json::from_slice(&bytes).ok()?;
            (f.row_config_hash == row_hash && f.cell.report.is_some()).then_some(f.cell)
        })
        .collect();
    if done.iter().all(Option::is_some) {
        return done.into_iter().map(|c| (c.expect("checked"), false)).collect();
    }

    let dir = row_dir(out, row);
    let seeds = cfg.eval.seeds;
    let monitor = &rc.train.monitor_sigmas;
    let trained = match resume.then(|| load_row_checkpoints(&dir, seeds, monitor)).flatten() {
        Some(p) => Ok(p),
        None => train_seeds(&rc.model, &rc.train, splits, seeds, &dir, &row_hash)
            .map(|outs| outs.into_iter().map(|o| o.best).collect()),
    };
    let data = eval_set(splits);
    (0..sigmas.len())
        .map(|col| {
            if let Some(c) = done[col].take() {
                return (c, false);
            }
            let sigma = sigmas[col];
            let mut cell = blank(col);
            let result = trained.as_ref().map_err(|e| e.to_string()).and_then(|per_seed| {
                let m = monitor.iter().position(|s| *s == sigma).expect("monitored");
                let params: Vec<ParamSet> = per_seed.iter().map(|b| b[m].clone()).collect();
                let spec = rc.train.noise_spec(sigma);
                evaluate_grid(&rc.model, &params, data, &spec, cfg.eval.draws, &eval_rng(cfg, sigma))
                    .map_err(|e| e.to_string())
            });
            match result {
                Ok(r) => cell.report = Some(r),
                Err(e) => cell.error = Some(e),
            }
            let file = CellFile {
                config_hash: cfg.hash(),
                row_config_hash: row_hash.clone(),
                cell: cell.clone(),
            };
            if let Ok(bytes) = serde_json::to_vec_pretty(&file) {
                // A failed write only costs a recomputation on resume.
                let _ = write_file(&cell_path(out, row, sigma), bytes);
            }
            (cell, true)
        })
        .collect()
}

/// Train and evaluate every `(strength, warm-up) × σ_test` cell. With
/// `resume`, cells whose report already exists are loaded, and rows whose
/// checkpoints exist are not retrained.
pub fn run_sweep(cfg: &ExperimentConfig, resume: bool) -> Result<SweepSummary> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("config has no [sweep] section".into()))?;
    let out = cfg.resolved_output_dir();
    let splits = cfg.load_splits()?;
    let rows = sweep.rows();
    let per_row = par::map_indexed(rows.len(), |r| sweep_row(cfg, &sweep, &splits, &out, r, resume));
    let mut computed = 0;
    let mut cells = Vec::new();
    for row in per_row {
        for (c, fresh) in row {
            computed += usize::from(fresh);
            cells.push(c);
        }
    }
    let cols = cfg.eval.sigma_test.len();
    let best_row = (0..cols)
        .map(|col| {
            (0..rows.len())
                .filter_map(|r| cells[r * cols + col].report.as_ref().map(|rep| (r, rep.mean_acc)))
                .fold(None, |best: Option<(usize, f64)>, (r, a)| match best {
                    Some((_, b)) if b >= a => best,
                    _ => Some((r, a)),
                })
                .map(|(r, _)| r)
        })
        .collect();
    let summary = SweepSummary {
        config_hash: cfg.hash(),
        rows,
        sigma_test: cfg.eval.sigma_test.clone(),
        cells,
        best_row,
        computed,
    };
    write_snapshot(cfg, &out)?;
    write_file(&out.join("sweep").join("summary.txt"), render_sweep_table(&summary))?;
    write_file(&out.join("sweep").join("summary.csv"), render_sweep_csv(&summary))?;
    write_file(&out.join("sweep").join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    let mut manifest = RunManifest::new("sweep", &summary.config_hash);
    manifest.files = list_files(&out);
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(summary)
}

pub fn cmd_sweep(config_path: &Path, resume: bool) -> Result<SweepSummary> {
    run_sweep(&ExperimentConfig::load(config_path)?, resume)
}

/// Staircase table; the best cell of each column is wrapped in `**`.
pub fn render_sweep_table(s: &SweepSummary) -> String {
    let mut out = format!("# config_hash {}\n", s.config_hash);
    let _ = write!(out, "{:>10} {:>8}", "strength", "warmup");
    for sigma in &s.sigma_test {
        let _ = write!(out, " | {:>26}", format!("σ_test={sigma}"));
    }
    out.push('\n');
    for (r, (strength, warmup)) in s.rows.iter().enumerate() {
        let _ = write!(out, "{strength:>10} {warmup:>8}");
        for col in 0..s.sigma_test.len() {
            let c = s.cell(r, col);
            let text = match (&c.report, &c.error) {
                (Some(rep), _) if s.best_row[col] == Some(r) => format!("**{}**", rep.format_pm()),
                (Some(rep), _) => rep.format_pm(),
                (None, Some(_)) => "failed".to_string(),
                (None, None) => "-".to_string(),
            };
            let _ = write!(out, " | {text:>26}");
        }
        out.push('\n');
    }
    out
}

pub fn render_sweep_csv(s: &SweepSummary) -> String {
    let mut out = String::from("strength,warmup,sigma_test,mean_acc,noise_std,weight_std,error\n");
    for c in &s.cells {
        let (m, n, w) = match &c.report {
            Some(r) => (
                r.mean_acc.to_string(),
                r.noise_std.to_string(),
                r.weight_std.map(|w| w.to_string()).unwrap_or_default(),
            ),
            None => Default::default(),
        };
        let err = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(out, "{},{},{},{m},{n},{w},{err}", c.strength, c.warmup, c.sigma_test);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOutput {
    pub config_hash: String,
    pub files: Vec<PathBuf>,
    pub bound: Vec<BoundReport>,
    pub taylor: Vec<TaylorReport>,
}

pub const REPORT_BOUND_SIGMAS: [f64; 5] = [0.01, 0.02, 0.05, 0.1, 0.2];
pub const REPORT_TAYLOR_SIGMAS: [f64; 3] = [0.005, 0.01, 0.02];
pub const REPORT_MC_SAMPLES: usize = 2000;
pub const REPORT_DELTA: f64 = 0.05;

/// Per-figure CSV series for one metrics log.
pub fn series_csvs(log: &[MetricsRecord]) -> Vec<(&'static str, String)> {
    let sigmas: Vec<f64> = log
        .first()
        .map(|r| r.val_acc_noisy.iter().map(|n| n.sigma).collect())
        .unwrap_or_default();
    let mut header = vec!["epoch".to_string(), "val_acc_clean".to_string()];
    header.extend(sigmas.iter().map(|s| format!("val_acc_noisy_{s}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let acc: Vec<Vec<f64>> = log
        .iter()
        .map(|r| {
            let mut row = vec![r.epoch as f64, r.val_acc_clean];
            row.extend(r.val_acc_noisy.iter().map(|n| n.acc));
            row
        })
        .collect();
    let mut out = vec![
        ("accuracy_vs_epoch.csv", render_csv(&header_refs, &acc)),
        (
            "grad_norm_vs_epoch.csv",
            render_csv(
                &["epoch", "grad_norm_mean"],
                &log.iter().map(|r| vec![r.epoch as f64, r.grad_norm_mean]).collect::<Vec<_>>(),
            ),
        ),
        (
            "sharpness_vs_loss.csv",
            render_csv(
                &["train_loss", "grad_sharpness_mean"],
                &log.iter().map(|r| vec![r.train_loss, r.grad_sharpness_mean]).collect::<Vec<_>>(),
            ),
        ),
    ];
    let cos: Vec<Vec<f64>> = log
        .iter()
        .filter_map(|r| r.cos_sim_mean.map(|c| vec![r.epoch as f64, c]))
        .collect();
    if !cos.is_empty() {
        out.push(("cosine_vs_epoch.csv", render_csv(&["epoch", "cos_sim_mean"], &cos)));
    }
    let mut total = 0.0;
    let dist: Vec<Vec<f64>> = log
        .iter()
        .map(|r| {
            total += r.step_distance;
            vec![r.epoch as f64, r.step_distance, total]
        })
        .collect();
    out.push(("distance_cumulative.csv", render_csv(&["epoch", "step_distance", "cumulative"], &dist)));
    out
}

/// Emits plot-ready CSV series for every replica with a metrics log, and
/// landscape / bound / Taylor tables where a best checkpoint and config
/// snapshot are present.
pub fn run_report(run: &Path) -> Result<ReportOutput> {
    let mut logs: Vec<(String, PathBuf)> = seed_dirs(run)
        .into_iter()
        .filter(|d| d.join(METRICS_FILE).is_file())
        .map(|d| (d.file_name().unwrap_or_default().to_string_lossy().into_owned(), d))
        .collect();
    if run.join(METRICS_FILE).is_file() {
        logs.insert(0, ("run".to_string(), run.to_path_buf()));
    }
    if logs.is_empty() {
        return Err(Error::Config(format!("no {METRICS_FILE} under {}", run.display())));
    }
    let cfg = match find_snapshot(run) {
        Some(p) => Some(ExperimentConfig::load(&p)?),
        None => None,
    };
    let hash = match (&cfg, RunManifest::read(&run.join(MANIFEST_FILE))) {
        (_, Ok(m)) => m.config_hash,
        (Some(c), Err(_)) => c.hash(),
        (None, Err(_)) => String::from("unknown"),
    };
    let report_dir = run.join("report");
    let mut files = Vec::new();
    let mut bound = Vec::new();
    let mut taylor = Vec::new();
    let splits = cfg.as_ref().map(|c| c.load_splits()).transpose()?;

    for (label, dir) in &logs {
        let log = read_metrics(&dir.join(METRICS_FILE))?;
        for (name, text) in series_csvs(&log) {
            let p = report_dir.join(label).join(name);
            write_file(&p, text)?;
            files.push(p);
        }
        let (Some(cfg), Some(splits)) = (&cfg, &splits) else { continue };
        let Ok((model, params)) = checkpoint::load(&dir.join(BEST_CKPT)) else { continue };
        let obj = ModelObjective::new(&model, &splits.train.data, 0.0);
        let mut rng = RngStream::new(cfg.train.seed, StreamId::NoiseEval).substream(0x5EED);
        for (name, count, grid) in [("loss_slice_1d.csv", 1, 41), ("loss_slice_2d.csv", 2, 21)] {
            let spec = LossSliceSpec {
                direction_count: count,
                grid,
                extent: 1.0,
                filter_normalized: true,
            };
            let p = report_dir.join(label).join(name);
            write_file(&p, loss_slice(&obj, &params, &spec, &mut rng)?.to_csv())?;
            files.push(p);
        }
        let mc = RngStream::new(cfg.train.seed, StreamId::NoiseEval).substream(0xB0);
        let mut brows = Vec::new();
        for sigma in REPORT_BOUND_SIGMAS {
            let inp = BoundInputs::for_params(&params.theta, splits.train.len(), REPORT_DELTA, sigma);
            let b = bound_rhs(&obj, &params, &inp, REPORT_MC_SAMPLES, &mc)?;
            brows.push(vec![sigma, b.perturbed_loss, b.mc_stderr, b.h, b.total]);
            bound.push(b);
        }
        let p = report_dir.join(label).join("bound.csv");
        write_file(&p, render_csv(&["sigma", "perturbed_loss", "mc_stderr", "h", "total"], &brows))?;
        files.push(p);
        let mut trows = Vec::new();
        for sigma in REPORT_TAYLOR_SIGMAS {
            let t = taylor_check(
                &obj,
                &params,
                sigma,
                REPORT_MC_SAMPLES,
                TraceMethod::Hutchinson { probes: 100 },
                McDesign::Antithetic,
                &mc,
            )?;
            trows.push(vec![sigma, t.loss, t.trace, t.lhs, t.rhs, t.gap, t.mc_stderr]);
            taylor.push(t);
        }
        let p = report_dir.join(label).join("taylor.csv");
        write_file(&p, render_csv(&["sigma", "loss", "trace", "lhs", "rhs", "gap", "mc_stderr"], &trows))?;
        files.push(p);
    }

    let output = ReportOutput {
        config_hash: hash,
        files,
        bound,
        taylor,
    };
    write_file(&report_dir.join("report.json"), serde_json::to_vec_pretty(&output)?)?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(mean_acc: f64) -> EvalReport {
        EvalReport {
            mean_acc,
            noise_std: 0.01,
            weight_std: Some(0.02),
            per_cell: vec![vec![mean_acc]],
            sigma_test: 0.1,
            rmse: None,
        }
    }

    fn summary() -> SweepSummary {
        let cell = |row, strength, acc: Option<f64>| SweepCell {
            row,
            strength,
            warmup: 0,
            sigma_test: 0.1,
            report: acc.map(report),
            error: acc.is_none().then(|| "diverged, badly".to_string()),
        };
        SweepSummary {
            config_hash: "abc".into(),
            rows: vec![(0.0, 0), (0.1, 0)],
            sigma_test: vec![0.1],
            cells: vec![cell(0, 0.0, Some(0.5)), cell(1, 0.1, None)],
            best_row: vec![Some(0)],
            computed: 2,
        }
    }

    #[test]
    fn file_names_are_stable() {
        assert_eq!(best_for_sigma(0.1), "best-sigma-0.1.ckpt");
        assert_eq!(best_for_sigma(0.0), "best-sigma-0.ckpt");
        assert_eq!(cell_path(Path::new("out"), 2, 0.05), PathBuf::from("out/sweep/row-2/sigma-0.05/report.json"));
        assert_eq!(seed_dir(Path::new("run"), 1), PathBuf::from("run/seed-1"));
    }

    #[test]
    fn seed_replicas_shift_only_the_seed() {
        let base = ExperimentConfig::desk_default().train;
        let c = seed_config(&base, 2);
        assert_eq!(c.seed, base.seed + 2);
        assert_eq!(TrainConfig { seed: base.seed, ..c }, base);
    }

    #[test]
    fn eval_noise_depends_on_sigma_not_position() {
        let cfg = ExperimentConfig::desk_default();
        let mut a = eval_rng(&cfg, 0.1);
        let mut b = eval_rng(&cfg, 0.1);
        let mut c = eval_rng(&cfg, 0.2);
        let (x, y, z) = (a.uniform(), b.uniform(), c.uniform());
        assert_eq!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn sweep_table_marks_best_and_failures() {
        let s = summary();
        let table = render_sweep_table(&s);
        assert!(table.contains("**50.00 ± 1.00 ± 2.00**"));
        assert!(table.contains("failed"));
        let csv = render_sweep_csv(&s);
        let last = csv.lines().last().unwrap();
        assert_eq!(last, "0.1,0,0.1,,,,diverged; badly");
    }

    #[test]
    fn series_skip_cosine_when_never_logged() {
        let rec = MetricsRecord {
            epoch: 1,
            train_loss: 0.5,
            val_acc_clean: 0.9,
            val_acc_noisy: vec![],
            grad_norm_mean: 1.0,
            grad_sharpness_mean: 0.0,
            cos_sim_mean: None,
            perturbation_norm_mean: 0.0,
            step_distance: 2.0,
            lr: 0.05,
            strength_t: 0.0,
        };
        let names: Vec<&str> = series_csvs(&[rec.clone(), MetricsRecord { epoch: 2, ..rec }])
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert!(!names.contains(&"cosine_vs_epoch.csv"));
        assert_eq!(names.len(), 4);
    }
}
