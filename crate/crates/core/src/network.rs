//! Small dense feed-forward classifiers with exact reverse-mode gradients.
//!
//! Parameters live in one flat vector laid out layer by layer: the weight
//! matrix `[out x in]` row-major, then the bias vector. Each weight row is one
//! *filter* slice and each bias vector is one bias slice; the noise model
//! scales perturbations per slice.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::rng::RngStream;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Hidden layer widths; empty means a linear (softmax regression) model.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SliceKind {
    WeightFilter,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSlice {
    pub offset: usize,
    pub length: usize,
    pub kind: SliceKind,
    pub layer: usize,
}

impl FilterSlice {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.length
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub theta: Vec<f64>,
    partition: Vec<FilterSlice>,
}

impl ParamSet {
    pub fn new(theta: Vec<f64>, partition: Vec<FilterSlice>) -> Result<Self> {
        let mut expected = 0;
        for s in &partition {
            if s.length == 0 || s.offset != expected {
                return Err(Error::Shape(format!(
                    "partition slice {s:?} is empty or not contiguous at offset {expected}"
                )));
            }
            expected += s.length;
        }
        if expected != theta.len() {
            return Err(Error::Shape(format!(
                "partition covers {expected} of {} parameters",
                theta.len()
            )));
        }
        Ok(Self { theta, partition })
    }

    /// A parameter vector treated as one weight filter.
    pub fn single_filter(theta: Vec<f64>) -> Self {
        let length = theta.len();
        Self {
            theta,
            partition: vec![FilterSlice {
                offset: 0,
                length,
                kind: SliceKind::WeightFilter,
                layer: 0,
            }],
        }
    }

    pub fn partition(&self) -> &[FilterSlice] {
        &self.partition
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Same partition, different values.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.theta.len(),
                theta.len()
            )));
        }
        Ok(Self {
            theta,
            partition: self.partition.clone(),
        })
    }

    pub fn filter_max_abs(&self, slice: &FilterSlice) -> f64 {
        filter_max_abs(&self.theta[slice.range()])
    }
}

/// `max_j |w_j|` over one slice; 0 for an all-zero slice.
pub fn filter_max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: DenseTensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: DenseTensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "batch inputs {:?} vs {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` gathered into a new batch.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs: DenseTensor::new(vec![idx.len(), d], data).expect("gathered rows"),
            labels,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden.contains(&0) {
            return Err(Error::domain(format!("model widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(in, out)` for every dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn partition(&self) -> Vec<FilterSlice> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (layer, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            for _ in 0..fan_out {
                out.push(FilterSlice {
                    offset,
                    length: fan_in,
                    kind: SliceKind::WeightFilter,
                    layer,
                });
                offset += fan_in;
            }
            out.push(FilterSlice {
                offset,
                length: fan_out,
                kind: SliceKind::Bias,
                layer,
            });
            offset += fan_out;
        }
        out
    }

    pub fn zeros(&self) -> ParamSet {
        ParamSet {
            theta: vec![0.0; self.param_count()],
            partition: self.partition(),
        }
    }

    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init(&self, rng: &mut RngStream) -> ParamSet {
        let mut theta = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_dims() {
            let limit = (6.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                theta.push(rng.random_range(-limit..limit));
            }
            theta.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamSet {
            theta,
            partition: self.partition(),
        }
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "model expects {} parameters, got {}",
                self.param_count(),
                theta.len()
            )));
        }
        Ok(())
    }

    /// Hidden activations and logits for every row of `inputs`; element 0 is
    /// the input itself.
    fn forward_tape(&self, theta: &[f64], inputs: &DenseTensor) -> Result<Vec<Vec<f64>>> {
        self.check_params(theta)?;
        if inputs.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "model input dim {} vs data dim {}",
                self.input_dim,
                inputs.cols()
            )));
        }
        let m = inputs.rows();
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut tape = Vec::with_capacity(dims.len() + 1);
        tape.push(inputs.as_slice().to_vec());
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &theta[offset..offset + fan_in * fan_out];
            let b = &theta[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let prev = &tape[l];
            let mut next = vec![0.0; m * fan_out];
            for s in 0..m {
                let a = &prev[s * fan_in..(s + 1) * fan_in];
                let z = &mut next[s * fan_out..(s + 1) * fan_out];
                for (o, zo) in z.iter_mut().enumerate() {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let mut acc = b[o];
                    for (wi, ai) in row.iter().zip(a) {
                        acc += wi * ai;
                    }
                    *zo = if l == last {
                        acc
                    } else {
                        self.activation.apply(acc)
                    };
                }
            }
            if !crate::tensor::all_finite(&next) {
                return Err(Error::NonFiniteActivation { layer: l });
            }
            tape.push(next);
        }
        Ok(tape)
    }

    /// Raw logits, `[rows x num_classes]` row-major.
    pub fn logits(&self, theta: &[f64], inputs: &DenseTensor) -> Result<Vec<f64>> {
        Ok(self.forward_tape(theta, inputs)?.pop().expect("logits"))
    }

    pub fn predict(&self, theta: &[f64], inputs: &DenseTensor) -> Result<Vec<usize>> {
        let logits = self.logits(theta, inputs)?;
        Ok(logits.chunks(self.num_classes).map(argmax).collect())
    }

    pub fn forward_loss(&self, theta: &[f64], batch: &Batch, smoothing: f64) -> Result<f64> {
        check_smoothing(smoothing)?;
        let logits = self.logits(theta, &batch.inputs)?;
        let c = self.num_classes;
        let mut total = 0.0;
        for (row, &y) in logits.chunks(c).zip(&batch.labels) {
            total += smoothed_ce(row, y, smoothing);
        }
        Ok(total / batch.len() as f64)
    }

    pub fn loss_and_grad(
        &self,
        theta: &[f64],
        batch: &Batch,
        smoothing: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        check_smoothing(smoothing)?;
        let tape = self.forward_tape(theta, &batch.inputs)?;
        let m = batch.len();
        let c = self.num_classes;
        let inv_m = 1.0 / m as f64;
        let logits = tape.last().expect("logits");

        let mut total = 0.0;
        let mut delta = vec![0.0; m * c];
        for s in 0..m {
            let row = &logits[s * c..(s + 1) * c];
            let y = batch.labels[s];
            total += smoothed_ce(row, y, smoothing);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
            for k in 0..c {
                let p = (row[k] - max).exp() / denom;
                let q = smoothing / c as f64 + if k == y { 1.0 - smoothing } else { 0.0 };
                delta[s * c + k] = (p - q) * inv_m;
            }
        }

        grad.iter_mut().for_each(|g| *g = 0.0);
        let dims = self.layer_dims();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(i, o) in &dims {
            offsets.push(off);
            off += i * o + o;
        }
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let w_off = offsets[l];
            let b_off = w_off + fan_in * fan_out;
            let a_prev = &tape[l];
            for s in 0..m {
                let d = &delta[s * fan_out..(s + 1) * fan_out];
                let a = &a_prev[s * fan_in..(s + 1) * fan_in];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let gw = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    for (g, ai) in gw.iter_mut().zip(a) {
                        *g += dv * ai;
                    }
                    grad[b_off + o] += dv;
                }
            }
            if l > 0 {
                let w = &theta[w_off..w_off + fan_in * fan_out];
                let mut next = vec![0.0; m * fan_in];
                for s in 0..m {
                    let d = &delta[s * fan_out..(s + 1) * fan_out];
                    let out = &mut next[s * fan_in..(s + 1) * fan_in];
                    for (o, &dv) in d.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        let row = &w[o * fan_in..(o + 1) * fan_in];
                        for (x, wi) in out.iter_mut().zip(row) {
                            *x += dv * wi;
                        }
                    }
                    let a = &a_prev[s * fan_in..(s + 1) * fan_in];
                    for (x, &ai) in out.iter_mut().zip(a) {
                        *x *= self.activation.derivative_from_output(ai);
                    }
                }
                delta = next;
            }
        }
        Ok(total * inv_m)
    }

    /// Fraction of rows whose argmax logit (lowest index on ties) equals the label.
    pub fn accuracy(&self, theta: &[f64], batches: &[&Batch]) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for b in batches {
            let pred = self.predict(theta, &b.inputs)?;
            correct += pred.iter().zip(&b.labels).filter(|(p, y)| p == y).count();
            total += b.len();
        }
        if total == 0 {
            return Err(Error::domain("accuracy on an empty dataset"));
        }
        Ok(correct as f64 / total as f64)
    }
}

fn check_smoothing(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::domain(format!("label smoothing must be in [0,1), got {s}")));
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy against `(1-s)·onehot(y) + s/C`.
fn smoothed_ce(logits: &[f64], y: usize, smoothing: f64) -> f64 {
    let c = logits.len() as f64;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let mean_logit = logits.iter().sum::<f64>() / c;
    // -Σ q_k (z_k - lse) with Σ q_k = 1
    lse - (1.0 - smoothing) * logits[y] - smoothing * mean_logit
}

/// A model evaluated on one batch, as an [`Objective`] over its parameters.
#[derive(Clone, Copy)]
pub struct ModelObjective<'a> {
    pub model: &'a ModelSpec,
    pub batch: &'a Batch,
    pub smoothing: f64,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a ModelSpec, batch: &'a Batch, smoothing: f64) -> Self {
        Self {
            model,
            batch,
            smoothing,
        }
    }
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.model.param_count()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        self.model.forward_loss(theta, self.batch, self.smoothing)
    }

    fn loss_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.model
            .loss_and_grad(theta, self.batch, self.smoothing, grad)
    }
}
