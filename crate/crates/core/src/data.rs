//! Desk-scale datasets: Gaussian blobs, interleaved spirals and IDX
//! (MNIST-format) files.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Batch;
use crate::rng::RngStream;
use crate::tensor::DenseTensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: Batch,
    pub num_classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(data: Batch, num_classes: usize, split: SplitTag) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::domain("dataset must hold at least one example"));
        }
        if let Some(y) = data.labels.iter().find(|y| **y >= num_classes) {
            return Err(Error::domain(format!(
                "label {y} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            data,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.inputs.cols()
    }

    /// Consecutive minibatches of size `m` in stored order; the last one may be short.
    pub fn minibatches(&self, m: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(m.max(1)).map(|c| self.data.select(c)).collect()
    }

    /// Minibatches of size `m` over a permutation drawn from `rng`.
    pub fn shuffled_minibatches(&self, m: usize, rng: &mut RngStream) -> Vec<Batch> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(m.max(1)).map(|c| self.data.select(c)).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for y in &self.data.labels {
            h[*y] += 1;
        }
        h
    }
}

fn build(rows: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize) -> Result<Dataset> {
    let inputs = DenseTensor::new(vec![labels.len(), dim], rows)?;
    Dataset::new(Batch::new(inputs, labels)?, classes, SplitTag::Train)
}

/// Unit-variance Gaussian clusters centred on the vertices of a regular
/// simplex with pairwise distance `separation`. Needs `classes <= dim`.
pub fn gen_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::domain("blob counts must be >= 1"));
    }
    if classes > dim {
        return Err(Error::domain(format!(
            "blobs place {classes} simplex vertices in {dim} dimensions; need classes <= dim"
        )));
    }
    // e_c - centroid has norm sqrt(1 - 1/C); vertices are sqrt(2) apart.
    let scale = separation / std::f64::consts::SQRT_2;
    let centroid = 1.0 / classes as f64;
    let mut rows = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            for j in 0..dim {
                let vertex = if j < classes {
                    (if j == c { 1.0 } else { 0.0 }) - centroid
                } else {
                    0.0
                };
                rows.push(scale * vertex + rng.standard_normal());
            }
            labels.push(c);
        }
    }
    build(rows, dim, labels, classes)
}

/// `classes` interleaved 2-D spiral arms of `per_class` points each, radius
/// rising from 0.05 to 1 over 1.5 turns, with isotropic Gaussian jitter.
pub fn gen_spirals(
    classes: usize,
    per_class: usize,
    noise_std: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 {
        return Err(Error::domain("spiral counts must be >= 1"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::domain("spiral noise must be >= 0"));
    }
    const TURNS: f64 = 1.5;
    let tau = std::f64::consts::TAU;
    let mut rows = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for i in 0..per_class {
            let frac = if per_class == 1 {
                0.5
            } else {
                i as f64 / (per_class - 1) as f64
            };
            let r = 0.05 + 0.95 * frac;
            let angle = tau * c as f64 / classes as f64 + tau * TURNS * frac;
            rows.push(r * angle.cos() + noise_std * rng.standard_normal());
            rows.push(r * angle.sin() + noise_std * rng.standard_normal());
            labels.push(c);
        }
    }
    build(rows, 2, labels, classes)
}

fn read_u32_be(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Parses an IDX image file: magic 0x00000803, three big-endian u32 sizes
/// `(n, rows, cols)`, then `n·rows·cols` unsigned bytes.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = read_u32_be(bytes, 4, path)? as usize;
    let rows = read_u32_be(bytes, 8, path)? as usize;
    let cols = read_u32_be(bytes, 12, path)? as usize;
    let d = rows * cols;
    let need = 16 + n * d;
    if bytes.len() < need {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: need,
            actual: bytes.len(),
        });
    }
    let pixels = bytes[16..need].iter().map(|b| f64::from(*b) / 255.0).collect();
    Ok((n, d, pixels))
}

/// Parses an IDX label file: magic 0x00000801, one big-endian u32 count, then bytes.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = read_u32_be(bytes, 4, path)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: need,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..need].iter().map(|b| usize::from(*b)).collect())
}

/// Loads an IDX image/label pair with pixels scaled to `[0, 1]`. The class
/// count is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (n, d, pixels) = parse_idx_images(&img_bytes, images_path)?;
    let labels = parse_idx_labels(&lbl_bytes, labels_path)?;
    if labels.len() != n {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    build(pixels, d, labels, classes)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

/// Shuffles and cuts `ds` into train/val/test by `fractions`. Sizes are
/// `round(f·n)` for train and val, the remainder for test. A zero fraction
/// yields `None`; a positive fraction that rounds to an empty split is an error.
pub fn split(ds: &Dataset, fractions: [f64; 3], rng: &mut RngStream) -> Result<Splits> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || fractions[0] <= 0.0 {
        return Err(Error::domain(format!("bad split fractions {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    let n = ds.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_test = n.saturating_sub(n_train + n_val);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);

    let make = |part: &[usize], frac: f64, tag: SplitTag| -> Result<Option<Dataset>> {
        if frac == 0.0 {
            return Ok(None);
        }
        if part.is_empty() {
            return Err(Error::domain(format!("{tag:?} split is empty")));
        }
        Ok(Some(Dataset {
            data: ds.data.select(part),
            num_classes: ds.num_classes,
            split: tag,
        }))
    };
    let train = make(&idx[..n_train], fractions[0], SplitTag::Train)?.expect("train fraction > 0");
    let val = make(&idx[n_train..n_train + n_val], fractions[1], SplitTag::Val)?;
    let test = make(&idx[n_train + n_val..n_train + n_val + n_test], fractions[2], SplitTag::Test)?;
    Ok(Splits { train, val, test })
}
