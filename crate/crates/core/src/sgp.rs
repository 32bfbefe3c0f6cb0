//! Sparse Gaussian process transition functions over an inducing basis.
//!
//! [`SparsePosterior`] is the shared engine: a kernel, a basis of value or
//! derivative observations with per-point noise, and one target vector per
//! latent dimension. The plain inducing-point model and the fixed-point model
//! both build one and differ only in their basis.

use serde::{Deserialize, Serialize};

pub use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::kernels::{contraction_weights, AugmentedBasisPoint, FeatureExpectations, KernelHyperparams, KernelView};
use crate::linalg::{Cholesky, Mat};
use crate::scalar::Real;

/// Inducing points: locations `Z`, values `U` (one column per latent
/// dimension) and per-point value noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingSet<T> {
    /// `M × D`
    pub locations: Mat<T>,
    /// `M × D`
    pub values: Mat<T>,
    pub noise_std: Vec<T>,
}

impl<T: Real> InducingSet<T> {
    pub fn new(locations: Mat<T>, values: Mat<T>, noise_std: Vec<T>) -> Result<Self> {
        let s = InducingSet { locations, values, noise_std };
        s.validate()?;
        Ok(s)
    }

    /// Inducing set with no points in `dim` dimensions.
    pub fn empty(dim: usize) -> Self {
        InducingSet { locations: Mat::zeros(0, dim), values: Mat::zeros(0, dim), noise_std: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.locations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.locations.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, d) = (self.locations.rows(), self.locations.cols());
        if self.values.rows() != m || self.values.cols() != d || self.noise_std.len() != m {
            return Err(Error::shape(format!(
                "inducing set: locations {m}x{d}, values {}x{}, {} noise entries",
                self.values.rows(),
                self.values.cols(),
                self.noise_std.len()
            )));
        }
        if let Some(s) = self.noise_std.iter().find(|s| !(s.value() > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!("inducing noise std must be positive, got {}", s.value())));
        }
        if !self.locations.is_finite() || !self.values.is_finite() {
            return Err(Error::InvalidParameter("inducing set contains non-finite entries".into()));
        }
        Ok(())
    }

    pub fn basis(&self) -> Vec<AugmentedBasisPoint<T>> {
        (0..self.len()).map(|m| AugmentedBasisPoint::value(self.locations.row(m).to_vec())).collect()
    }
}

/// Gram matrix including noise and jitter, with its Cholesky factor.
#[derive(Clone, Debug)]
pub struct FactorizedGram<T> {
    matrix: Mat<T>,
    chol: Cholesky<T>,
    jitter: f64,
}

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;

impl<T: Real> FactorizedGram<T> {
    /// Adds `1e-8·scale` to the diagonal and factorizes, escalating the jitter
    /// tenfold up to `1e-4·scale` on failure.
    pub fn new(matrix: Mat<T>, scale: T, context: &str) -> Result<Self> {
        if !matrix.is_finite() || !(scale.value() > 0.0) || !scale.is_finite() {
            return Err(Error::conditioning(format!("{context}: non-finite gram")));
        }
        let n = matrix.rows();
        let mut factor = JITTER_START;
        while factor <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = scale * T::from_f64(factor);
            let mut m = matrix.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(&m) {
                return Ok(FactorizedGram { matrix: m, chol, jitter: jitter.value() });
            }
            factor *= 10.0;
        }
        Err(Error::conditioning(context))
    }

    /// The factorized matrix (noise and jitter included).
    pub fn matrix(&self) -> &Mat<T> {
        &self.matrix
    }

    pub fn cholesky(&self) -> &Cholesky<T> {
        &self.chol
    }

    /// Absolute jitter that was added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.chol.solve(b)
    }
}

/// Posterior of `D` independent scalar processes sharing one kernel and one
/// observed basis. Everything that depends only on the parameters is computed
/// once here; predictions reuse it.
#[derive(Clone, Debug)]
pub struct SparsePosterior<T> {
    view: KernelView<T>,
    stats: FeatureExpectations<T>,
    gram: FactorizedGram<T>,
    alpha: Vec<Vec<T>>,
    /// Packed contraction weights of `K⁻¹`.
    kinv_w: Vec<T>,
    /// Packed contraction weights of `α_{d1} α_{d2}ᵀ` for `d1 ≤ d2`.
    alpha_w: Vec<Vec<T>>,
}

impl<T: Real> SparsePosterior<T> {
    /// `noise_var` is added to the gram diagonal; `targets[d]` holds the
    /// observed values of process `d` at every basis point.
    pub fn new(
        kernel: &KernelHyperparams<T>,
        basis: Vec<AugmentedBasisPoint<T>>,
        noise_var: &[T],
        targets: &[Vec<T>],
    ) -> Result<Self> {
        kernel.validate()?;
        let n = basis.len();
        if noise_var.len() != n || targets.iter().any(|t| t.len() != n) {
            return Err(Error::shape("basis, noise and targets disagree in length"));
        }
        let stats = FeatureExpectations::new(kernel, &basis)?;
        let view = KernelView::new(kernel);
        let mut k = Mat::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let c = view.cross_cov(&basis[a], &basis[b]);
                k[(a, b)] = c;
                k[(b, a)] = c;
            }
            k[(a, a)] += noise_var[a];
        }
        let gram = FactorizedGram::new(k, kernel.jitter_scale(), "inducing gram")?;
        let alpha: Vec<Vec<T>> = targets.iter().map(|t| gram.solve(t)).collect();
        let kinv_w = contraction_weights(&gram.cholesky().inverse());
        let d = alpha.len();
        let mut alpha_w = Vec::with_capacity(d * (d + 1) / 2);
        for d1 in 0..d {
            for d2 in d1..d {
                let (x, y) = (&alpha[d1], &alpha[d2]);
                let mut w = Vec::with_capacity(n * (n + 1) / 2);
                for a in 0..n {
                    for b in a..n {
                        w.push(if a == b { x[a] * y[a] } else { x[a] * y[b] + x[b] * y[a] });
                    }
                }
                alpha_w.push(w);
            }
        }
        Ok(SparsePosterior { view, stats, gram, alpha, kinv_w, alpha_w })
    }

    pub fn dim(&self) -> usize {
        self.view.dim()
    }

    pub fn basis(&self) -> &[AugmentedBasisPoint<T>] {
        self.stats.basis()
    }

    pub fn gram(&self) -> &FactorizedGram<T> {
        &self.gram
    }

    /// `K⁻¹ targets_d` per latent dimension.
    pub fn alpha(&self) -> &[Vec<T>] {
        &self.alpha
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::shape(format!("input of length {len} for a {}-dimensional model", self.dim())));
        }
        Ok(())
    }

    /// Predictive mean and variance per latent dimension at a point input.
    pub fn predict(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.check_input(x.len())?;
        let phi: Vec<T> = self.basis().iter().map(|b| self.view.feature(x, b)).collect();
        let mean = self.alpha.iter().map(|a| T::dot(&phi, a)).collect();
        let v = self.gram.cholesky().forward(&phi);
        let var = (self.view.diag(x) - T::dot(&v, &v)).max_val(T::zero());
        Ok((mean, vec![var; self.dim()]))
    }

    /// Jacobian `∂ E[f_d(x)] / ∂x_j` of the posterior mean map.
    pub fn mean_jacobian(&self, x: &[T]) -> Result<Mat<T>> {
        self.check_input(x.len())?;
        let d = self.dim();
        let grads: Vec<Vec<T>> = self.basis().iter().map(|b| self.view.feature_grad(x, b)).collect();
        Ok(Mat::from_fn(d, d, |i, j| {
            let col: Vec<T> = grads.iter().map(|g| g[j]).collect();
            T::dot(&col, &self.alpha[i])
        }))
    }

    /// Moments of `f(x)` for `x ~ belief`, integrating over both the input
    /// and the process. The belief is assumed valid.
    pub fn predict_moments(&self, belief: &GaussianBelief<T>) -> Result<GaussianBelief<T>> {
        self.check_input(belief.dim())?;
        let d = self.dim();
        let e = self.stats.vec(belief)?;
        let q = self.stats.packed_outer(belief)?;
        let mean: Vec<T> = self.alpha.iter().map(|a| T::dot(&e, a)).collect();
        let gp_var = self.stats.kernel_diag(belief)? - T::dot(&q, &self.kinv_w);
        let mut cov = Mat::zeros(d, d);
        let mut idx = 0;
        for d1 in 0..d {
            for d2 in d1..d {
                let c = T::dot(&q, &self.alpha_w[idx]) - mean[d1] * mean[d2];
                idx += 1;
                if d1 == d2 {
                    cov[(d1, d1)] = (c + gp_var).max_val(T::zero());
                } else {
                    cov[(d1, d2)] = c;
                    cov[(d2, d1)] = c;
                }
            }
        }
        Ok(GaussianBelief { mean, cov })
    }
}

fn plain_posterior<T: Real>(k: &KernelHyperparams<T>, ind: &InducingSet<T>) -> Result<SparsePosterior<T>> {
    ind.validate()?;
    if ind.is_empty() {
        return Err(Error::InvalidParameter("inducing set must contain at least one point".into()));
    }
    if ind.dim() != k.dim() {
        return Err(Error::shape(format!("inducing set of dimension {} for kernel of dimension {}", ind.dim(), k.dim())));
    }
    let noise: Vec<T> = ind.noise_std.iter().map(|s| s.square()).collect();
    let targets: Vec<Vec<T>> = (0..ind.dim()).map(|d| ind.values.column(d)).collect();
    SparsePosterior::new(k, ind.basis(), &noise, &targets)
}

/// `K(Z, Z) + diag((σ^u)²) + jitter`, factorized.
pub fn gram<T: Real>(k: &KernelHyperparams<T>, ind: &InducingSet<T>) -> Result<FactorizedGram<T>> {
    Ok(plain_posterior(k, ind)?.gram)
}

/// Predictive mean and variance at a point input.
pub fn predict<T: Real>(k: &KernelHyperparams<T>, ind: &InducingSet<T>, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    plain_posterior(k, ind)?.predict(x)
}

/// Moment-matched prediction for a Gaussian input.
pub fn predict_moments<T: Real>(
    k: &KernelHyperparams<T>,
    ind: &InducingSet<T>,
    belief: &GaussianBelief<T>,
) -> Result<GaussianBelief<T>> {
    belief.validate()?;
    plain_posterior(k, ind)?.predict_moments(belief)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Cholesky;
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;

    fn eq(ell: f64) -> KernelHyperparams<f64> {
        KernelHyperparams::exponentiated_quadratic(1.0, &[ell])
    }

    fn set_1d(z: &[f64], u: &[f64], s: f64) -> InducingSet<f64> {
        InducingSet::new(Mat::from_row_slice(z.len(), 1, z), Mat::from_row_slice(u.len(), 1, u), vec![s; z.len()]).unwrap()
    }

    #[test]
    fn single_point_gram() {
        let g = gram(&eq(1.0), &set_1d(&[0.3], &[0.0], 0.1)).unwrap();
        assert!((g.matrix()[(0, 0)] - 1.01 - 1e-8).abs() < 1e-15);
        assert_eq!(g.jitter(), 1e-8);
    }

    #[test]
    fn coincident_points_need_jitter() {
        let singular = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(Cholesky::new(&singular).is_none());
        let g = FactorizedGram::new(singular, 1.0, "test").unwrap();
        assert!(g.jitter() >= 1e-8);
    }

    #[test]
    fn hopeless_gram_is_a_conditioning_error() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(FactorizedGram::new(m, 1.0, "test"), Err(Error::Conditioning { .. })));
    }

    #[test]
    fn empty_inducing_set_is_rejected() {
        assert!(gram(&eq(1.0), &InducingSet::empty(1)).is_err());
    }

    #[test]
    fn interpolates_noiseless_inducing_point() {
        let ind = set_1d(&[0.0, 50.0, -50.0], &[0.8, -1.0, 2.0], 1e-6);
        let (m, v) = predict(&eq(1.0), &ind, &[0.0]).unwrap();
        assert!((m[0] - 0.8).abs() < 1e-6);
        assert!(v[0] < 1e-6);
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let k = KernelHyperparams::exponentiated_quadratic(2.5, &[0.5]);
        let ind = set_1d(&[-1.0, 0.0, 1.0], &[0.3, -0.4, 0.9], 0.1);
        let (m, v) = predict(&k, &ind, &[40.0]).unwrap();
        assert!(m[0].abs() < 1e-6);
        assert!((v[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn dense_grid_reproduces_cubic_map() {
        let r = 1.5;
        let f = |x: f64| r * x - x.powi(3);
        let z: Vec<f64> = (0..25).map(|i| -1.2 + 2.4 * i as f64 / 24.0).collect();
        let u: Vec<f64> = z.iter().map(|&x| f(x)).collect();
        let ind = set_1d(&z, &u, 1e-3);
        let k = KernelHyperparams::exponentiated_quadratic(1.0, &[0.3]);
        let post = plain_posterior(&k, &ind).unwrap();
        let sup = (0..=200)
            .map(|i| -1.0 + 2.0 * i as f64 / 200.0)
            .map(|x| (post.predict(&[x]).unwrap().0[0] - f(x)).abs())
            .fold(0.0, f64::max);
        assert!(sup < 0.05, "sup-norm error {sup}");
    }

    #[test]
    fn zero_input_covariance_matches_point_prediction() {
        let k = KernelHyperparams::exponentiated_quadratic(1.3, &[0.6, 0.9]);
        let ind = InducingSet::new(
            Mat::from_row_slice(3, 2, &[0.0, 0.1, 0.5, -0.4, -0.7, 0.3]),
            Mat::from_row_slice(3, 2, &[0.2, 0.1, -0.3, 0.6, 0.5, -0.2]),
            vec![0.05, 0.1, 0.2],
        )
        .unwrap();
        let x = [0.2, -0.1];
        let (m, v) = predict(&k, &ind, &x).unwrap();
        let out = predict_moments(&k, &ind, &GaussianBelief::point(x.to_vec())).unwrap();
        for d in 0..2 {
            assert!((out.mean[d] - m[d]).abs() < 1e-12);
            assert!((out.cov[(d, d)] - v[d]).abs() < 1e-12);
        }
        assert!(out.cov[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn linear_map_propagates_exactly() {
        let a = 0.8;
        let k = KernelHyperparams::<f64>::linear(&[1.0]);
        let ind = set_1d(&[1.0], &[a], 1e-6);
        let belief = GaussianBelief::diagonal(vec![0.7], &[0.3]).unwrap();
        let out = predict_moments(&k, &ind, &belief).unwrap();
        assert!((out.mean[0] - a * 0.7).abs() < 1e-7);
        assert!((out.cov[(0, 0)] - a * a * 0.3).abs() < 1e-7);
    }

    #[test]
    fn shrinking_input_covariance_converges_to_point_prediction() {
        let k = eq(0.7);
        let ind = set_1d(&[-1.0, -0.2, 0.4, 1.1], &[0.5, -0.1, 0.3, -0.6], 0.05);
        let post = plain_posterior(&k, &ind).unwrap();
        let grid: Vec<f64> = (0..=20).map(|i| -1.5 + 0.15 * i as f64).collect();
        let mut prev = f64::INFINITY;
        for s2 in [1e-1, 1e-3, 1e-5, 1e-7] {
            let sup = grid
                .iter()
                .map(|&x| {
                    let (m, _) = post.predict(&[x]).unwrap();
                    let out = post.predict_moments(&GaussianBelief::diagonal(vec![x], &[s2]).unwrap()).unwrap();
                    (out.mean[0] - m[0]).abs()
                })
                .fold(0.0, f64::max);
            assert!(sup < prev);
            prev = sup;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn variance_vanishes_at_noiseless_inducing_point() {
        let ind = set_1d(&[0.0, 1.0], &[0.1, 0.2], 1e-7);
        let (_, v) = predict(&eq(1.0), &ind, &[1.0]).unwrap();
        assert!(v[0] < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn gram_eigenvalues_bounded_by_noise(
            z in prop::collection::vec(-2.0f64..2.0, 8),
            s in prop::collection::vec(0.05f64..0.5, 8),
            ell in 0.2f64..2.0,
        ) {
            let ind = InducingSet::new(Mat::from_row_slice(8, 1, &z), Mat::zeros(8, 1), s.clone()).unwrap();
            let g = gram(&eq(ell), &ind).unwrap();
            let eig = SymmetricEigen::new(DMatrix::from_row_slice(8, 8, g.matrix().as_slice())).eigenvalues;
            let min_noise = s.iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
            prop_assert!(eig.iter().all(|&e| e >= min_noise - 1e-12));
        }

        #[test]
        fn outputs_finite_for_extreme_lengthscales(
            log_ell in -3.0f64..3.0,
            x in -5.0f64..5.0,
            s2 in 0.0f64..2.0,
        ) {
            let k = eq(10f64.powf(log_ell));
            let ind = set_1d(&[-1.0, 0.0, 1.0], &[0.3, -0.2, 0.5], 0.1);
            let (m, v) = predict(&k, &ind, &[x]).unwrap();
            prop_assert!(m[0].is_finite() && v[0].is_finite() && v[0] >= 0.0);
            let out = predict_moments(&k, &ind, &GaussianBelief::diagonal(vec![x], &[s2]).unwrap()).unwrap();
            prop_assert!(out.mean[0].is_finite() && out.cov[(0, 0)].is_finite() && out.cov[(0, 0)] >= 0.0);
        }
    }
}
