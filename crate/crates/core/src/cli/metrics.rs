//! On-disk artifacts: `metrics.jsonl`, plain CSV series and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::MetricsRecord;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.resolved.toml";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// One JSON object per line, epoch order.
pub fn write_metrics(path: &Path, log: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in log {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    write_file(path, out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let log = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<MetricsRecord>, _>>()?;
    if log.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
        return Err(Error::Config(format!("{}: epochs are not increasing", path.display())));
    }
    Ok(log)
}

/// Numeric CSV; values use the shortest round-trip representation.
pub fn render_csv(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty CSV".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|c| c.parse::<f64>().map_err(|e| Error::Config(format!("bad CSV cell {c:?}: {e}"))))
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok((header, rows))
}

/// Index of what a command wrote, stamped with the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config_hash: String,
    pub files: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            files: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_vec_pretty(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::NoisyAccuracy;

    fn record(epoch: usize) -> MetricsRecord {
        MetricsRecord {
            epoch,
            train_loss: 0.1 + 1.0 / 3.0,
            val_acc_clean: 0.875,
            val_acc_noisy: vec![NoisyAccuracy { sigma: 0.1, acc: 0.8125 }],
            grad_norm_mean: 1e-7,
            grad_sharpness_mean: -2.5e-3,
            cos_sim_mean: None,
            perturbation_norm_mean: 0.0,
            step_distance: 0.3,
            lr: 0.05,
            strength_t: 0.1,
        }
    }

    #[test]
    fn metrics_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        let log = vec![record(1), record(2)];
        write_metrics(&path, &log).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), log);
    }

    #[test]
    fn csv_round_trip_exactly() {
        let rows = vec![vec![1.0, 0.1 + 0.2, -1e-300], vec![2.0, 1.0 / 3.0, 5e300]];
        let (h, back) = parse_csv(&render_csv(&["a", "b", "c"], &rows)).unwrap();
        assert_eq!(h, vec!["a", "b", "c"]);
        assert_eq!(back, rows);
    }
}
