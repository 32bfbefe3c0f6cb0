//! Sparse GP transition maps with explicit fixed points.
//!
//! Every fixed point `s_p` contributes a value observation whose target is the
//! location itself (`f(s_p) = s_p`) and one derivative observation per latent
//! dimension whose targets are the rows of the local Jacobian `J_p`. The basis
//! is ordered `[values at Z | values at S | derivatives at S]`, the derivative
//! block running over dimensions in the outer loop and fixed points inside.

use serde::{Deserialize, Serialize};

use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::kernels::{AugmentedBasisPoint, KernelHyperparams};
use crate::linalg::Mat;
use crate::scalar::Real;
use crate::sgp::{FactorizedGram, InducingSet, SparsePosterior};

/// Noise on the Jacobian observations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianNoise {
    /// Jitter only.
    Exact,
    /// Variance `(σ^s_p)²/ℓ_j²` (EQ) or `(σ^s_p)²` (linear), so that a slot
    /// with large location noise also stops constraining the slope.
    #[default]
    Tied,
}

/// Fixed-point slots with isotropic location noise and local Jacobians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSet<T> {
    /// `P × D`
    pub locations: Mat<T>,
    pub noise_std: Vec<T>,
    /// `jacobians[p][(d, j)] = ∂f_d/∂x_j` at `s_p`.
    pub jacobians: Vec<Mat<T>>,
}

impl<T: Real> FixedPointSet<T> {
    pub fn new(locations: Mat<T>, noise_std: Vec<T>, jacobians: Vec<Mat<T>>) -> Result<Self> {
        let s = FixedPointSet { locations, noise_std, jacobians };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(dim: usize) -> Self {
        FixedPointSet { locations: Mat::zeros(0, dim), noise_std: Vec::new(), jacobians: Vec::new() }
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

    pub fn location(&self, p: usize) -> &[T] {
        self.locations.row(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (p, d) = (self.locations.rows(), self.locations.cols());
        if self.noise_std.len() != p || self.jacobians.len() != p {
            return Err(Error::shape(format!(
                "fixed points: {p} locations, {} noise entries, {} jacobians",
                self.noise_std.len(),
                self.jacobians.len()
            )));
        }
        if let Some(j) = self.jacobians.iter().find(|j| j.rows() != d || j.cols() != d) {
            return Err(Error::shape(format!("jacobian is {}x{}, expected {d}x{d}", j.rows(), j.cols())));
        }
        if let Some(s) = self.noise_std.iter().find(|s| !(s.value() > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!("fixed-point noise std must be positive, got {}", s.value())));
        }
        if !self.locations.is_finite() || !self.jacobians.iter().all(|j| j.is_finite()) {
            return Err(Error::InvalidParameter("fixed-point set contains non-finite entries".into()));
        }
        Ok(())
    }
}

/// Full transition-map parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel<T> {
    pub kernel: KernelHyperparams<T>,
    pub inducing: InducingSet<T>,
    pub fixed_points: FixedPointSet<T>,
    /// Per-dimension standard deviation of the additive transition noise; empty means none.
    #[serde(default = "Vec::new")]
    pub process_noise_std: Vec<T>,
    #[serde(default)]
    pub jacobian_noise: JacobianNoise,
}

impl<T: Real> TransitionModel<T> {
    pub fn new(kernel: KernelHyperparams<T>, inducing: InducingSet<T>, fixed_points: FixedPointSet<T>) -> Result<Self> {
        let m = TransitionModel {
            kernel,
            inducing,
            fixed_points,
            process_noise_std: Vec::new(),
            jacobian_noise: JacobianNoise::default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_jacobian_noise(mut self, policy: JacobianNoise) -> Self {
        self.jacobian_noise = policy;
        self
    }

    pub fn with_process_noise(mut self, std: Vec<T>) -> Self {
        self.process_noise_std = std;
        self
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.inducing.validate()?;
        self.fixed_points.validate()?;
        let d = self.dim();
        if self.inducing.dim() != d || self.fixed_points.dim() != d {
            return Err(Error::shape(format!(
                "kernel dimension {d}, inducing dimension {}, fixed-point dimension {}",
                self.inducing.dim(),
                self.fixed_points.dim()
            )));
        }
        let pn = &self.process_noise_std;
        if !pn.is_empty() && pn.len() != d {
            return Err(Error::shape(format!("{} process noise entries for dimension {d}", pn.len())));
        }
        if pn.iter().any(|s| !s.is_finite() || s.value() < 0.0) {
            return Err(Error::InvalidParameter("process noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Augmented basis in canonical order.
    pub fn basis(&self) -> Vec<AugmentedBasisPoint<T>> {
        let fp = &self.fixed_points;
        let mut basis = self.inducing.basis();
        basis.extend((0..fp.len()).map(|p| AugmentedBasisPoint::value(fp.location(p).to_vec())));
        for j in 0..self.dim() {
            basis.extend((0..fp.len()).map(|p| AugmentedBasisPoint::derivative(fp.location(p).to_vec(), j)));
        }
        basis
    }

    /// Diagonal noise variances over the augmented basis.
    pub fn noise_variances(&self) -> Vec<T> {
        let fp = &self.fixed_points;
        let mut noise: Vec<T> = self.inducing.noise_std.iter().map(|s| s.square()).collect();
        let fp_var: Vec<T> = fp.noise_std.iter().map(|s| s.square()).collect();
        noise.extend(fp_var.iter().copied());
        for j in 0..self.dim() {
            let slope_scale = match (&self.jacobian_noise, &self.kernel) {
                (JacobianNoise::Exact, _) => None,
                (JacobianNoise::Tied, KernelHyperparams::ExponentiatedQuadratic { lengthscales, .. }) => {
                    Some(lengthscales[j].square().recip())
                }
                (JacobianNoise::Tied, KernelHyperparams::Linear { .. }) => Some(T::one()),
            };
            noise.extend(fp_var.iter().map(|&v| match slope_scale {
                Some(s) => v * s,
                None => T::zero(),
            }));
        }
        noise
    }

    /// Builds the posterior used by every prediction.
    pub fn posterior(&self) -> Result<SparsePosterior<T>> {
        self.validate()?;
        SparsePosterior::new(&self.kernel, self.basis(), &self.noise_variances(), &augmented_targets(self))
    }

    /// Posterior plus the process noise added after every propagation.
    pub fn dynamics(&self) -> Result<Dynamics<T>> {
        let posterior = self.posterior()?;
        let process_var = match self.process_noise_std.is_empty() {
            true => vec![T::zero(); self.dim()],
            false => self.process_noise_std.iter().map(|s| s.square()).collect(),
        };
        Ok(Dynamics { posterior, process_var })
    }

    pub fn to_f64(&self) -> TransitionModel<f64> {
        self.cast(|v| v.value())
    }

    /// Converts every scalar with `f`.
    pub fn cast<U: Real>(&self, f: impl Fn(T) -> U + Copy) -> TransitionModel<U> {
        let vec = |v: &[T]| v.iter().map(|&x| f(x)).collect::<Vec<U>>();
        TransitionModel {
            kernel: match &self.kernel {
                KernelHyperparams::ExponentiatedQuadratic { signal_variance, lengthscales } => {
                    KernelHyperparams::ExponentiatedQuadratic {
                        signal_variance: f(*signal_variance),
                        lengthscales: vec(lengthscales),
                    }
                }
                KernelHyperparams::Linear { weight_variances } => {
                    KernelHyperparams::Linear { weight_variances: vec(weight_variances) }
                }
            },
            inducing: InducingSet {
                locations: self.inducing.locations.map(f),
                values: self.inducing.values.map(f),
                noise_std: vec(&self.inducing.noise_std),
            },
            fixed_points: FixedPointSet {
                locations: self.fixed_points.locations.map(f),
                noise_std: vec(&self.fixed_points.noise_std),
                jacobians: self.fixed_points.jacobians.iter().map(|j| j.map(f)).collect(),
            },
            process_noise_std: vec(&self.process_noise_std),
            jacobian_noise: self.jacobian_noise,
        }
    }
}

impl TransitionModel<f64> {
    pub fn lift<T: Real>(&self) -> TransitionModel<T> {
        self.cast(T::from_f64)
    }
}

/// Latent transition `x' = f(x) + ε`, `ε ~ N(0, diag(process_var))`.
#[derive(Clone, Debug)]
pub struct Dynamics<T> {
    pub posterior: SparsePosterior<T>,
    pub process_var: Vec<T>,
}

impl<T: Real> Dynamics<T> {
    pub fn dim(&self) -> usize {
        self.posterior.dim()
    }

    /// Moments of `f(x) + ε` for `x` drawn from `belief`.
    pub fn predict_moments(&self, belief: &GaussianBelief<T>) -> Result<GaussianBelief<T>> {
        let mut out = self.posterior.predict_moments(belief)?;
        for (d, v) in self.process_var.iter().enumerate() {
            out.cov[(d, d)] += *v;
        }
        Ok(out)
    }
}

/// Block gram over the augmented basis with noise and jitter, factorized.
pub fn assemble_block_gram<T: Real>(model: &TransitionModel<T>) -> Result<FactorizedGram<T>> {
    Ok(model.posterior()?.gram().clone())
}

/// Per-dimension targets `[U[:, d]; S[:, d]; J_p[d, j] for j, p]`.
pub fn augmented_targets<T: Real>(model: &TransitionModel<T>) -> Vec<Vec<T>> {
    let fp = &model.fixed_points;
    (0..model.dim())
        .map(|d| {
            let mut t = model.inducing.values.column(d);
            t.extend(fp.locations.column(d));
            for j in 0..model.dim() {
                t.extend(fp.jacobians.iter().map(|jac| jac[(d, j)]));
            }
            t
        })
        .collect()
}

/// Predictive mean and variance at a point input.
pub fn predict<T: Real>(model: &TransitionModel<T>, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    model.posterior()?.predict(x)
}

/// Moment-matched prediction for a Gaussian input.
pub fn predict_moments<T: Real>(model: &TransitionModel<T>, belief: &GaussianBelief<T>) -> Result<GaussianBelief<T>> {
    belief.validate()?;
    model.posterior()?.predict_moments(belief)
}

/// Jacobian of the posterior mean map at `x`.
pub fn posterior_jacobian<T: Real>(model: &TransitionModel<T>, x: &[T]) -> Result<Mat<T>> {
    model.posterior()?.mean_jacobian(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgp;
    use proptest::prelude::*;

    fn model_1d(z: &[f64], u: &[f64], s: &[f64], sigma_s: &[f64], jac: &[f64], ell: f64) -> TransitionModel<f64> {
        let inducing = if z.is_empty() {
            InducingSet::empty(1)
        } else {
            InducingSet::new(Mat::from_row_slice(z.len(), 1, z), Mat::from_row_slice(u.len(), 1, u), vec![0.05; z.len()]).unwrap()
        };
        let fp = FixedPointSet::new(
            Mat::from_row_slice(s.len(), 1, s),
            sigma_s.to_vec(),
            jac.iter().map(|&j| Mat::from_row_slice(1, 1, &[j])).collect(),
        )
        .unwrap();
        TransitionModel::new(KernelHyperparams::exponentiated_quadratic(1.0, &[ell]), inducing, fp).unwrap()
    }

    fn random_model_2d(seed: u64, sigma_s: f64) -> TransitionModel<f64> {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, "model");
        let mut r = |a: f64, b: f64| rng.random_range(a..b);
        let z = Mat::from_fn(4, 2, |_, _| r(-1.5, 1.5));
        let u = Mat::from_fn(4, 2, |_, _| r(-1.0, 1.0));
        let s = Mat::from_fn(2, 2, |_, _| r(-1.0, 1.0));
        let jac = (0..2).map(|_| Mat::from_fn(2, 2, |_, _| r(-0.9, 0.9))).collect();
        let k = KernelHyperparams::exponentiated_quadratic(r(0.5, 2.0), &[r(0.5, 1.5), r(0.5, 1.5)]);
        TransitionModel::new(
            k,
            InducingSet::new(z, u, vec![0.1; 4]).unwrap(),
            FixedPointSet::new(s, vec![sigma_s; 2], jac).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn no_fixed_points_reduces_to_plain_gram() {
        let m = model_1d(&[-0.5, 0.2, 0.9], &[0.1, 0.3, -0.2], &[], &[], &[], 0.8);
        let a = assemble_block_gram(&m).unwrap();
        let b = sgp::gram(&m.kernel, &m.inducing).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        let x = [0.37];
        assert_eq!(predict(&m, &x).unwrap(), sgp::predict(&m.kernel, &m.inducing, &x).unwrap());
    }

    #[test]
    fn single_fixed_point_block() {
        let (ell, sigma_s) = (0.6, 0.2);
        let m = model_1d(&[], &[], &[0.4], &[sigma_s], &[0.3], ell).with_jacobian_noise(JacobianNoise::Exact);
        let g = assemble_block_gram(&m).unwrap();
        let jit = g.jitter();
        let k = g.matrix();
        assert!((k[(0, 0)] - (1.0 + sigma_s * sigma_s + jit)).abs() < 1e-15);
        assert_eq!(k[(0, 1)], 0.0);
        assert_eq!(k[(1, 0)], 0.0);
        assert!((k[(1, 1)] - (1.0 / (ell * ell) + jit)).abs() < 1e-12);
    }

    #[test]
    fn block_gram_is_symmetric() {
        for seed in 0..20 {
            let g = assemble_block_gram(&random_model_2d(seed, 0.1)).unwrap();
            assert!(g.matrix().max_abs_diff(&g.matrix().transpose()) < 1e-12);
        }
    }

    #[test]
    fn targets_follow_basis_order() {
        let m = model_1d(&[0.0], &[0.3], &[0.7], &[0.1], &[-0.5], 1.0);
        assert_eq!(augmented_targets(&m), vec![vec![0.3, 0.7, -0.5]]);
        let mut moved = m.clone();
        moved.fixed_points.locations[(0, 0)] = -0.2;
        assert_eq!(augmented_targets(&moved)[0][1], -0.2);
        let plain = model_1d(&[0.0, 1.0], &[0.3, 0.4], &[], &[], &[], 1.0);
        assert_eq!(augmented_targets(&plain), vec![vec![0.3, 0.4]]);
    }

    #[test]
    fn targets_2d_are_dimension_major() {
        let mut m = random_model_2d(3, 0.1);
        m.fixed_points.jacobians[0] = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        m.fixed_points.jacobians[1] = Mat::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let t = augmented_targets(&m);
        // [J_0[d,0], J_1[d,0], J_0[d,1], J_1[d,1]]
        assert_eq!(&t[0][6..], &[1.0, 5.0, 2.0, 6.0]);
        assert_eq!(&t[1][6..], &[3.0, 7.0, 4.0, 8.0]);
        let basis = m.basis();
        assert_eq!(basis[6].kind, crate::kernels::BasisKind::Derivative(0));
        assert_eq!(basis[8].kind, crate::kernels::BasisKind::Derivative(1));
    }

    #[test]
    fn map_passes_through_conditioned_fixed_point() {
        let m = model_1d(&[], &[], &[0.5], &[1e-4], &[0.2], 1.0);
        let mean = |x: f64| predict(&m, &[x]).unwrap().0[0];
        assert!((mean(0.5) - 0.5).abs() < 1e-6);
        let h = 1e-5;
        assert!(((mean(0.5 + h) - mean(0.5 - h)) / (2.0 * h) - 0.2).abs() < 1e-4);
        assert!((posterior_jacobian(&m, &[0.5]).unwrap()[(0, 0)] - 0.2).abs() < 1e-4);
    }

    #[test]
    fn disabled_slot_matches_plain_model() {
        let z = [-1.0, -0.3, 0.4, 1.0];
        let u = [-0.6, -0.2, 0.3, 0.5];
        let off = model_1d(&z, &u, &[0.1], &[1e3], &[0.9], 0.7);
        let plain = model_1d(&z, &u, &[], &[], &[], 0.7);
        let (a, b) = (off.posterior().unwrap(), plain.posterior().unwrap());
        for i in 0..=100 {
            let x = [-1.2 + 2.4 * i as f64 / 100.0];
            let (pa, pb) = (a.predict(&x).unwrap(), b.predict(&x).unwrap());
            assert!((pa.0[0] - pb.0[0]).abs() < 1e-4);
            assert!((pa.1[0] - pb.1[0]).abs() < 1e-4);
        }
    }

    #[test]
    fn moments_reduce_to_point_prediction_and_plain_model() {
        let m = random_model_2d(5, 0.1);
        let x = vec![0.1, -0.3];
        let (pm, pv) = predict(&m, &x).unwrap();
        let out = predict_moments(&m, &GaussianBelief::point(x)).unwrap();
        for d in 0..2 {
            assert!((out.mean[d] - pm[d]).abs() < 1e-12);
            assert!((out.cov[(d, d)] - pv[d]).abs() < 1e-10);
        }
        let mut plain = m.clone();
        plain.fixed_points = FixedPointSet::empty(2);
        let b = GaussianBelief::diagonal(vec![0.2, 0.4], &[0.3, 0.1]).unwrap();
        assert_eq!(
            predict_moments(&plain, &b).unwrap(),
            sgp::predict_moments(&plain.kernel, &plain.inducing, &b).unwrap()
        );
    }

    #[test]
    fn linear_model_has_constant_jacobian() {
        let a = -0.6;
        let m = TransitionModel::new(
            KernelHyperparams::linear(&[1.0]),
            InducingSet::new(Mat::from_row_slice(2, 1, &[1.0, -2.0]), Mat::from_row_slice(2, 1, &[a, -2.0 * a]), vec![1e-5; 2]).unwrap(),
            FixedPointSet::empty(1),
        )
        .unwrap();
        let post = m.posterior().unwrap();
        for x in [-3.0, 0.0, 0.5, 7.0] {
            assert!((post.mean_jacobian(&[x]).unwrap()[(0, 0)] - a).abs() < 1e-6);
        }
    }

    #[test]
    fn conditioned_fixed_points_reproduce_locations_and_jacobians() {
        for seed in 0..10 {
            let m = random_model_2d(seed, 1e-4);
            let post = m.posterior().unwrap();
            for p in 0..m.fixed_points.len() {
                let s = m.fixed_points.location(p);
                let (mean, _) = post.predict(s).unwrap();
                for d in 0..2 {
                    assert!((mean[d] - s[d]).abs() <= 3e-4 + 1e-6);
                }
                let j = post.mean_jacobian(s).unwrap();
                assert!(j.max_abs_diff(&m.fixed_points.jacobians[p]) < 1e-3);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn jacobian_matches_finite_differences(seed in 0u64..1000, x0 in -1.5f64..1.5, x1 in -1.5f64..1.5) {
            let m = random_model_2d(seed, 0.1);
            let post = m.posterior().unwrap();
            let j = post.mean_jacobian(&[x0, x1]).unwrap();
            let h = 1e-5;
            for c in 0..2 {
                let mut a = [x0, x1];
                let mut b = [x0, x1];
                a[c] += h;
                b[c] -= h;
                let (ma, mb) = (post.predict(&a).unwrap().0, post.predict(&b).unwrap().0);
                for r in 0..2 {
                    let fd = (ma[r] - mb[r]) / (2.0 * h);
                    prop_assert!((j[(r, c)] - fd).abs() <= 1e-4 * fd.abs().max(1e-2));
                }
            }
        }
    }
}
