//! Training small networks that stay accurate under random weight
//! perturbations.
//!
//! The library covers a dense MLP with hand-written backprop, per-filter
//! scaled weight noise, SGD / SAM / RWP optimizers with strength schedules,
//! sharpness instrumentation, the perturbed PAC-Bayes bound, and the noisy
//! evaluation protocol (K noise draws × S trained seeds).
//!
//! With the default `parallel` feature, Monte Carlo draws, evaluation cells,
//! sweep rows and Hessian probes run on rayon. Every parallel item owns an
//! indexed RNG substream and results are reduced in index order, so builds
//! with and without the feature produce identical numbers.

// `!(x >= 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bound;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evalharness;
pub mod network;
pub mod objective;
pub mod optim;
pub mod par;
pub mod perturb;
pub mod rng;
pub mod sharpness;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{Activation, Batch, ModelSpec, ParamSet};
pub use rng::{RngStream, StreamId};
pub use tensor::DenseTensor;
