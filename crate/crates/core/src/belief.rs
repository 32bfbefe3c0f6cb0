//! Gaussian beliefs over the latent state.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

/// Mean and covariance of the latent state at one filtering stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief<T> {
    pub mean: Vec<T>,
    pub cov: Mat<T>,
}

impl<T: Real> GaussianBelief<T> {
    /// Validated constructor.
    pub fn new(mean: Vec<T>, cov: Mat<T>) -> Result<Self> {
        let b = GaussianBelief { mean, cov };
        b.validate()?;
        Ok(b)
    }

    /// Belief with independent coordinates.
    pub fn diagonal(mean: Vec<T>, var: &[T]) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::shape(format!("mean has {} entries, variances {}", mean.len(), var.len())));
        }
        Self::new(mean, Mat::from_diag(var))
    }

    /// Point mass at `x`.
    pub fn point(x: Vec<T>) -> Self {
        let n = x.len();
        GaussianBelief { mean: x, cov: Mat::zeros(n, n) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variances(&self) -> Vec<T> {
        self.cov.diagonal()
    }

    /// Checks shape, symmetry (1e-12 relative) and positive semidefiniteness
    /// (smallest eigenvalue ≥ −1e-10 relative).
    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if self.cov.rows() != n || self.cov.cols() != n {
            return Err(Error::shape(format!(
                "covariance is {}x{} for a {n}-dimensional mean",
                self.cov.rows(),
                self.cov.cols()
            )));
        }
        if !self.mean.iter().all(|m| m.is_finite()) || !self.cov.is_finite() {
            return Err(Error::NumericDomain("belief contains non-finite entries".into()));
        }
        let c = self.cov.to_f64();
        let scale = c.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if c.max_abs_diff(&c.transpose()) > 1e-12 * scale {
            return Err(Error::NumericDomain("covariance is not symmetric".into()));
        }
        if c.is_diagonal() {
            if let Some(v) = c.diagonal().into_iter().find(|&v| v < -1e-10 * scale) {
                return Err(Error::NumericDomain(format!("negative variance {v}")));
            }
            return Ok(());
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, c.as_slice())).eigenvalues;
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -1e-10 * scale {
            return Err(Error::NumericDomain(format!("covariance is not positive semidefinite (eigenvalue {min})")));
        }
        Ok(())
    }

    /// Copy with off-diagonal covariance entries removed.
    pub fn diagonalize(&self) -> Self {
        let n = self.dim();
        let cov = Mat::from_fn(n, n, |i, j| if i == j { self.cov[(i, i)] } else { T::zero() });
        GaussianBelief { mean: self.mean.clone(), cov }
    }

    pub fn to_f64(&self) -> GaussianBelief<f64> {
        GaussianBelief { mean: self.mean.iter().map(|v| v.value()).collect(), cov: self.cov.to_f64() }
    }
}
