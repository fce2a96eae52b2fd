//! Experiment configuration (TOML), strictly validated before any work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{gen_blobs, gen_spirals, load_idx, split, Dataset, Splits};
use crate::error::{Error, Result};
use crate::evalharness::{DEFAULT_DRAWS, DEFAULT_SEEDS};
use crate::network::{Activation, ModelSpec};
use crate::optim::{OptimizerKind, TrainConfig};
use crate::perturb::{NoiseFamily, Schedule, ScheduleKind};
use crate::rng::{RngStream, StreamId};

/// Overrides the root that relative `output_dir`s resolve against.
pub const OUTPUT_ROOT_ENV: &str = "PERTURBNET_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Spirals {
        classes: usize,
        per_class: usize,
        noise_std: f64,
    },
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub seed: u64,
    /// Train / val / test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_sigma_test")]
    pub sigma_test: Vec<f64>,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
}

fn default_sigma_test() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.2]
}

fn default_draws() -> usize {
    DEFAULT_DRAWS
}

fn default_seeds() -> usize {
    DEFAULT_SEEDS
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sigma_test: default_sigma_test(),
            draws: DEFAULT_DRAWS,
            seeds: DEFAULT_SEEDS,
        }
    }
}

/// Rows are `strengths × warmups`; warm-up 0 means a constant schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub strengths: Vec<f64>,
    #[serde(default = "default_warmups")]
    pub warmups: Vec<usize>,
    #[serde(default = "default_ramp")]
    pub ramp: ScheduleKind,
}

fn default_warmups() -> Vec<usize> {
    vec![0]
}

fn default_ramp() -> ScheduleKind {
    ScheduleKind::Quadratic
}

impl SweepConfig {
    pub fn rows(&self) -> Vec<(f64, usize)> {
        self.strengths
            .iter()
            .flat_map(|s| self.warmups.iter().map(move |w| (*s, *w)))
            .collect()
    }

    pub fn schedule(&self, strength: f64, warmup: usize) -> Schedule {
        if warmup == 0 {
            Schedule::constant(strength)
        } else {
            Schedule {
                kind: self.ramp,
                max_strength: strength,
                warmup_iters: warmup,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    /// Desk-scale profile: 2-class spirals, 2×64 ReLU MLP, 60 epochs.
    pub fn desk_default() -> Self {
        Self {
            model: ModelSpec {
                input_dim: 2,
                hidden: vec![64, 64],
                activation: Activation::Relu,
                num_classes: 2,
            },
            data: DataConfig {
                source: DataSource::Spirals {
                    classes: 2,
                    per_class: 1000,
                    noise_std: 0.03,
                },
                seed: 0,
                split: default_split(),
            },
            train: TrainConfig {
                optimizer: OptimizerKind::Rwp,
                epochs: 60,
                batch_size: 64,
                lr0: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                label_smoothing: 0.1,
                noise: NoiseFamily::Gaussian,
                schedule: Schedule::constant(0.1),
                seed: 0,
                monitor_sigmas: vec![0.1],
                monitor_draws: 2,
            },
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/desk"),
            sweep: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => Error::Config(format!("{}: {other}", path.display())),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.eval.draws == 0 || self.eval.seeds == 0 {
            return Err(Error::Config("eval.draws and eval.seeds must be >= 1".into()));
        }
        if self.eval.sigma_test.is_empty() || self.eval.sigma_test.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("eval.sigma_test must be a non-empty list of values >= 0".into()));
        }
        let sum: f64 = self.data.split.iter().sum();
        if self.data.split.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data.split must be non-negative and sum to 1, got {:?}", self.data.split)));
        }
        match &self.data.source {
            DataSource::Spirals { classes, .. } | DataSource::Blobs { classes, .. } => {
                if *classes != self.model.num_classes {
                    return Err(Error::Config(format!(
                        "data has {classes} classes, model.num_classes is {}",
                        self.model.num_classes
                    )));
                }
            }
            DataSource::Idx { .. } => {}
        }
        let in_dim = match &self.data.source {
            DataSource::Spirals { .. } => Some(2),
            DataSource::Blobs { dim, .. } => Some(*dim),
            DataSource::Idx { .. } => None,
        };
        if let Some(d) = in_dim {
            if d != self.model.input_dim {
                return Err(Error::Config(format!(
                    "data dimension {d} differs from model.input_dim {}",
                    self.model.input_dim
                )));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.strengths.is_empty() || sw.strengths.iter().any(|s| !(*s >= 0.0)) {
                return Err(Error::Config("sweep.strengths must be a non-empty list of values >= 0".into()));
            }
            if sw.warmups.is_empty() {
                return Err(Error::Config("sweep.warmups must not be empty".into()));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn load_splits(&self) -> Result<Splits> {
        let mut rng = RngStream::new(self.data.seed, StreamId::Init);
        let ds = match &self.data.source {
            DataSource::Spirals {
                classes,
                per_class,
                noise_std,
            } => gen_spirals(*classes, *per_class, *noise_std, &mut rng)?,
            DataSource::Blobs {
                classes,
                per_class,
                dim,
                separation,
            } => gen_blobs(*classes, *per_class, *dim, *separation, &mut rng)?,
            DataSource::Idx { images, labels } => {
                let ds = load_idx(images, labels)?;
                if ds.dim() != self.model.input_dim || ds.num_classes > self.model.num_classes {
                    return Err(Error::Config(format!(
                        "IDX data is {}-dimensional with {} classes; model expects {} and {}",
                        ds.dim(),
                        ds.num_classes,
                        self.model.input_dim,
                        self.model.num_classes
                    )));
                }
                ds
            }
        };
        let mut split_rng = RngStream::new(self.data.seed, StreamId::DataShuffle);
        split(&ds, self.data.split, &mut split_rng)
    }
}

/// Validation set for monitoring, falling back to train.
pub fn val_set(s: &Splits) -> &Dataset {
    s.val.as_ref().unwrap_or(&s.train)
}

/// Held-out set for noisy evaluation: test, else val, else train.
pub fn eval_set(s: &Splits) -> &Dataset {
    s.test.as_ref().or(s.val.as_ref()).unwrap_or(&s.train)
}
