//! Differentiable scalar objectives over a flat parameter vector.
//!
//! Optimizer steps, sharpness probes and the bound checks are written against
//! [`Objective`] so they run unchanged on a network minibatch or on the closed
//! form losses below (which the tests use as analytic references).

use crate::error::{Error, Result};

pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn loss(&self, theta: &[f64]) -> Result<f64>;

    /// Writes the gradient into `grad` and returns the loss.
    fn loss_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64>;

    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        self.loss_and_grad(theta, &mut g)?;
        Ok(g)
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn loss(&self, theta: &[f64]) -> Result<f64> {
        (**self).loss(theta)
    }
    fn loss_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        (**self).loss_and_grad(theta, grad)
    }
}

/// `½ (w - c)ᵀ A (w - c) + offset` with symmetric `A` (row-major).
#[derive(Debug, Clone)]
pub struct Quadratic {
    dim: usize,
    matrix: Vec<f64>,
    center: Vec<f64>,
    offset: f64,
}

impl Quadratic {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::Shape(format!(
                "quadratic needs {dim}x{dim} matrix, got {} values",
                matrix.len()
            )));
        }
        Ok(Self {
            dim,
            matrix,
            center: vec![0.0; dim],
            offset: 0.0,
        })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut matrix = vec![0.0; dim * dim];
        for (i, d) in diag.iter().enumerate() {
            matrix[i * dim + i] = *d;
        }
        Self {
            dim,
            matrix,
            center: vec![0.0; dim],
            offset: 0.0,
        }
    }

    pub fn with_center(mut self, center: Vec<f64>) -> Self {
        assert_eq!(center.len(), self.dim);
        self.center = center;
        self
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.matrix[i * self.dim + i]).sum()
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let d: Vec<f64> = theta.iter().zip(&self.center).map(|(w, c)| w - c).collect();
        let mut acc = 0.0;
        for i in 0..self.dim {
            let row = &self.matrix[i * self.dim..(i + 1) * self.dim];
            acc += d[i] * row.iter().zip(&d).map(|(a, x)| a * x).sum::<f64>();
        }
        Ok(0.5 * acc + self.offset)
    }

    fn loss_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        let d: Vec<f64> = theta.iter().zip(&self.center).map(|(w, c)| w - c).collect();
        let mut acc = 0.0;
        for i in 0..self.dim {
            let row = &self.matrix[i * self.dim..(i + 1) * self.dim];
            let ad = row.iter().zip(&d).map(|(a, x)| a * x).sum::<f64>();
            grad[i] = ad;
            acc += d[i] * ad;
        }
        Ok(0.5 * acc + self.offset)
    }
}

/// `bᵀw + offset`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub coef: Vec<f64>,
    pub offset: f64,
}

impl Objective for Linear {
    fn dim(&self) -> usize {
        self.coef.len()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.coef.iter().zip(theta).map(|(b, w)| b * w).sum::<f64>() + self.offset)
    }

    fn loss_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        grad.copy_from_slice(&self.coef);
        self.loss(theta)
    }
}

/// Pointwise sum of two objectives over the same parameters.
pub struct Sum<A, B>(pub A, pub B);

impl<A: Objective, B: Objective> Objective for Sum<A, B> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.0.loss(theta)? + self.1.loss(theta)?)
    }

    fn loss_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        let mut g2 = vec![0.0; grad.len()];
        let l1 = self.0.loss_and_grad(theta, grad)?;
        let l2 = self.1.loss_and_grad(theta, &mut g2)?;
        for (a, b) in grad.iter_mut().zip(&g2) {
            *a += b;
        }
        Ok(l1 + l2)
    }
}

/// Mean of several objectives (e.g. minibatches) sharing one parameter vector.
pub struct Mean<O>(pub Vec<O>);

impl<O: Objective> Objective for Mean<O> {
    fn dim(&self) -> usize {
        self.0.first().map_or(0, |o| o.dim())
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for o in &self.0 {
            acc += o.loss(theta)?;
        }
        Ok(acc / self.0.len() as f64)
    }

    fn loss_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut tmp = vec![0.0; grad.len()];
        let mut acc = 0.0;
        for o in &self.0 {
            acc += o.loss_and_grad(theta, &mut tmp)?;
            for (g, t) in grad.iter_mut().zip(&tmp) {
                *g += t;
            }
        }
        let n = self.0.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok(acc / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_value_and_gradient() {
        let q = Quadratic::diagonal(&[2.0]);
        let mut g = [0.0];
        let l = q.loss_and_grad(&[1.0], &mut g).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g[0], 2.0);
        assert_eq!(Quadratic::diagonal(&[1.0, 2.0, 3.0]).trace(), 6.0);
    }
}
