//! Covariance functions, their cross-derivatives, and closed-form Gaussian
//! expectations of kernel features.
//!
//! A basis point is either a function value at a location or the derivative
//! of the function along one coordinate at a location. The feature of a basis
//! point `b` at input `x` is the covariance between `f(x)` and that basis
//! observation, so value and derivative observations share one code path.

use serde::{Deserialize, Serialize};

use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::linalg::{Lu, Mat};
use crate::scalar::Real;

/// Kernel family and its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelHyperparams<T> {
    /// `σ² exp(−½ Σ_d (x_d − z_d)² / ℓ_d²)`
    ExponentiatedQuadratic { signal_variance: T, lengthscales: Vec<T> },
    /// `Σ_d w_d x_d z_d`
    Linear { weight_variances: Vec<T> },
}

impl<T: Real> KernelHyperparams<T> {
    pub fn exponentiated_quadratic(signal_variance: f64, lengthscales: &[f64]) -> Self {
        KernelHyperparams::ExponentiatedQuadratic {
            signal_variance: T::from_f64(signal_variance),
            lengthscales: crate::scalar::lift(lengthscales),
        }
    }

    pub fn linear(weight_variances: &[f64]) -> Self {
        KernelHyperparams::Linear { weight_variances: crate::scalar::lift(weight_variances) }
    }

    /// Latent dimension the kernel is defined on.
    pub fn dim(&self) -> usize {
        match self {
            KernelHyperparams::ExponentiatedQuadratic { lengthscales, .. } => lengthscales.len(),
            KernelHyperparams::Linear { weight_variances } => weight_variances.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: T| {
            if v.value() > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {}", v.value())))
            }
        };
        if self.dim() == 0 {
            return Err(Error::InvalidParameter("kernel dimension must be at least 1".into()));
        }
        match self {
            KernelHyperparams::ExponentiatedQuadratic { signal_variance, lengthscales } => {
                positive("signal_variance", *signal_variance)?;
                lengthscales.iter().try_for_each(|&l| positive("lengthscale", l))
            }
            KernelHyperparams::Linear { weight_variances } => {
                weight_variances.iter().try_for_each(|&w| positive("weight_variance", w))
            }
        }
    }

    /// Magnitude used to scale gram jitter.
    pub fn jitter_scale(&self) -> T {
        match self {
            KernelHyperparams::ExponentiatedQuadratic { signal_variance, .. } => *signal_variance,
            KernelHyperparams::Linear { weight_variances } => {
                weight_variances.iter().copied().fold(weight_variances[0], T::max_val)
            }
        }
    }

    fn check(&self, x: &[T], z: &[T]) -> Result<()> {
        let d = self.dim();
        if x.len() != d || z.len() != d {
            return Err(Error::shape(format!("kernel of dimension {d} evaluated at inputs of length {} and {}", x.len(), z.len())));
        }
        Ok(())
    }

    /// `1/ℓ²` per dimension (EQ) or the weights (linear).
    fn precisions(&self) -> Vec<T> {
        match self {
            KernelHyperparams::ExponentiatedQuadratic { lengthscales, .. } => {
                lengthscales.iter().map(|l| l.square().recip()).collect()
            }
            KernelHyperparams::Linear { weight_variances } => weight_variances.clone(),
        }
    }

    pub fn eval(&self, x: &[T], z: &[T]) -> Result<T> {
        self.check(x, z)?;
        Ok(KernelView::new(self).k(x, z))
    }

    /// `∂k(x, z)/∂x`.
    pub fn grad1(&self, x: &[T], z: &[T]) -> Result<Vec<T>> {
        self.check(x, z)?;
        let v = KernelView::new(self);
        Ok((0..self.dim()).map(|i| v.cov_dv(x, z, i)).collect())
    }

    /// `∂k(x, z)/∂z`.
    pub fn grad2(&self, x: &[T], z: &[T]) -> Result<Vec<T>> {
        self.check(x, z)?;
        let v = KernelView::new(self);
        Ok((0..self.dim()).map(|j| v.cov_vd(x, z, j)).collect())
    }

    /// `∂²k(x, z)/∂x_i∂z_j`.
    pub fn grad12(&self, x: &[T], z: &[T]) -> Result<Mat<T>> {
        self.check(x, z)?;
        let v = KernelView::new(self);
        let d = self.dim();
        Ok(Mat::from_fn(d, d, |i, j| v.cov_dd(x, z, i, j)))
    }
}

/// Which observation of the latent function a basis point carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    Value,
    /// Partial derivative along the given latent dimension.
    Derivative(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBasisPoint<T> {
    pub location: Vec<T>,
    pub kind: BasisKind,
}

impl<T: Real> AugmentedBasisPoint<T> {
    pub fn value(location: Vec<T>) -> Self {
        AugmentedBasisPoint { location, kind: BasisKind::Value }
    }

    pub fn derivative(location: Vec<T>, dim: usize) -> Self {
        AugmentedBasisPoint { location, kind: BasisKind::Derivative(dim) }
    }
}

fn check_basis<T: Real>(k: &KernelHyperparams<T>, basis: &[AugmentedBasisPoint<T>]) -> Result<()> {
    let d = k.dim();
    for (i, b) in basis.iter().enumerate() {
        if b.location.len() != d {
            return Err(Error::shape(format!("basis point {i} has length {}, expected {d}", b.location.len())));
        }
        if let BasisKind::Derivative(j) = b.kind {
            if j >= d {
                return Err(Error::shape(format!("basis point {i} differentiates dimension {j} of {d}")));
            }
        }
    }
    Ok(())
}

/// Kernel with precomputed precisions, used on hot paths without shape checks.
#[derive(Clone, Debug)]
pub(crate) struct KernelView<T> {
    linear: bool,
    scale: T,
    /// EQ: `1/ℓ²`; linear: weights.
    prec: Vec<T>,
    /// EQ: `1/(2ℓ²)`.
    half_prec: Vec<T>,
}

impl<T: Real> KernelView<T> {
    pub(crate) fn new(k: &KernelHyperparams<T>) -> Self {
        let prec = k.precisions();
        match k {
            KernelHyperparams::ExponentiatedQuadratic { signal_variance, .. } => {
                let half = T::from_f64(0.5);
                KernelView {
                    linear: false,
                    scale: *signal_variance,
                    half_prec: prec.iter().map(|&p| p * half).collect(),
                    prec,
                }
            }
            KernelHyperparams::Linear { .. } => {
                KernelView { linear: true, scale: T::one(), half_prec: Vec::new(), prec }
            }
        }
    }

    pub(crate) fn dim(&self) -> usize {
        self.prec.len()
    }

    pub(crate) fn k(&self, x: &[T], z: &[T]) -> T {
        if self.linear {
            let wx: Vec<T> = self.prec.iter().zip(x).map(|(&w, &xi)| w * xi).collect();
            T::dot(&wx, z)
        } else {
            T::gauss_factor(self.scale, T::zero(), x, z, &self.half_prec)
        }
    }

    /// `∂k(x, z)/∂z_j`
    fn cov_vd(&self, x: &[T], z: &[T], j: usize) -> T {
        if self.linear {
            self.prec[j] * x[j]
        } else {
            self.k(x, z) * (x[j] - z[j]) * self.prec[j]
        }
    }

    /// `∂k(x, z)/∂x_i`
    fn cov_dv(&self, x: &[T], z: &[T], i: usize) -> T {
        if self.linear {
            self.prec[i] * z[i]
        } else {
            -(self.k(x, z) * (x[i] - z[i]) * self.prec[i])
        }
    }

    /// `∂²k(x, z)/∂x_i∂z_j`
    fn cov_dd(&self, x: &[T], z: &[T], i: usize, j: usize) -> T {
        if self.linear {
            return if i == j { self.prec[i] } else { T::zero() };
        }
        let k = self.k(x, z);
        let ri = (x[i] - z[i]) * self.prec[i];
        let rj = (x[j] - z[j]) * self.prec[j];
        let diag = if i == j { self.prec[i] } else { T::zero() };
        k * (diag - ri * rj)
    }

    /// Prior covariance between two basis observations.
    pub(crate) fn cross_cov(&self, a: &AugmentedBasisPoint<T>, b: &AugmentedBasisPoint<T>) -> T {
        match (a.kind, b.kind) {
            (BasisKind::Value, BasisKind::Value) => self.k(&a.location, &b.location),
            (BasisKind::Value, BasisKind::Derivative(j)) => self.cov_vd(&a.location, &b.location, j),
            (BasisKind::Derivative(i), BasisKind::Value) => self.cov_dv(&a.location, &b.location, i),
            (BasisKind::Derivative(i), BasisKind::Derivative(j)) => self.cov_dd(&a.location, &b.location, i, j),
        }
    }

    /// `φ_b(x) = Cov(f(x), b)`.
    pub(crate) fn feature(&self, x: &[T], b: &AugmentedBasisPoint<T>) -> T {
        match b.kind {
            BasisKind::Value => self.k(x, &b.location),
            BasisKind::Derivative(j) => self.cov_vd(x, &b.location, j),
        }
    }

    /// `∂φ_b(x)/∂x`.
    pub(crate) fn feature_grad(&self, x: &[T], b: &AugmentedBasisPoint<T>) -> Vec<T> {
        let d = self.dim();
        match b.kind {
            BasisKind::Value => (0..d).map(|i| self.cov_dv(x, &b.location, i)).collect(),
            BasisKind::Derivative(j) => (0..d).map(|i| self.cov_dd(x, &b.location, i, j)).collect(),
        }
    }

    /// `k(x, x)`.
    pub(crate) fn diag(&self, x: &[T]) -> T {
        if self.linear {
            self.k(x, x)
        } else {
            self.scale
        }
    }
}

/// `Cov(a, b)` for two basis observations under the prior.
pub fn cross_cov<T: Real>(k: &KernelHyperparams<T>, a: &AugmentedBasisPoint<T>, b: &AugmentedBasisPoint<T>) -> Result<T> {
    check_basis(k, std::slice::from_ref(a))?;
    check_basis(k, std::slice::from_ref(b))?;
    Ok(KernelView::new(k).cross_cov(a, b))
}

/// Pointwise features `φ_b(x)` for every basis point.
pub fn features<T: Real>(k: &KernelHyperparams<T>, x: &[T], basis: &[AugmentedBasisPoint<T>]) -> Result<Vec<T>> {
    check_basis(k, basis)?;
    if x.len() != k.dim() {
        return Err(Error::shape(format!("input of length {} for kernel of dimension {}", x.len(), k.dim())));
    }
    let v = KernelView::new(k);
    Ok(basis.iter().map(|b| v.feature(x, b)).collect())
}

/// Constants of one product `φ_a φ_b` of EQ features.
#[derive(Clone, Debug)]
struct PairConst<T> {
    a: usize,
    b: usize,
    /// `(c_a + c_b)/2`
    mid: Vec<T>,
    /// `(c_a − c_b)/2`
    half_diff: Vec<T>,
    /// `−¼ Σ_d (c_a − c_b)_d² / ℓ_d²`
    log_scale: T,
}

#[derive(Clone, Debug)]
enum Stats<T> {
    Eq { sf2: T, sf4: T, a0: Vec<T>, pairs: Vec<PairConst<T>> },
    /// Every linear feature is `cᵀx`; rows are the coefficient vectors.
    Linear { w: Vec<T>, coef: Vec<Vec<T>> },
}

/// Precomputed constants for Gaussian expectations of the features of a fixed
/// basis. Construction is `O(B²)`; each evaluation reuses them.
#[derive(Clone, Debug)]
pub struct FeatureExpectations<T> {
    basis: Vec<AugmentedBasisPoint<T>>,
    dim: usize,
    stats: Stats<T>,
}

/// Per-belief factors shared by all features on the diagonal-covariance path.
struct DiagFactors<T> {
    ginv: Vec<T>,
    expo: Vec<T>,
    norm: T,
}

fn diag_factors<T: Real>(a0: &[T], var: &[T], s: f64) -> DiagFactors<T> {
    let s = T::from_f64(s);
    let half = T::from_f64(0.5);
    let ginv: Vec<T> = a0.iter().zip(var).map(|(&a, &v)| (T::one() + s * a * v).recip()).collect();
    let expo = a0.iter().zip(&ginv).map(|(&a, &g)| s * a * g * half).collect();
    let det: T = ginv.iter().fold(T::one(), |acc, &g| acc * g);
    DiagFactors { ginv, expo, norm: det.sqrt() }
}

/// Per-belief factors for a full covariance: `G = I + Σ·sA₀`.
struct FullFactors<T> {
    ginv: Mat<T>,
    /// `G⁻¹ Σ`
    tilted_cov: Mat<T>,
    /// `sA₀`
    prec: Vec<T>,
    norm: T,
}

fn full_factors<T: Real>(a0: &[T], cov: &Mat<T>, s: f64) -> Result<FullFactors<T>> {
    let d = a0.len();
    let s = T::from_f64(s);
    let prec: Vec<T> = a0.iter().map(|&a| s * a).collect();
    let g = Mat::from_fn(d, d, |i, j| {
        let id = if i == j { T::one() } else { T::zero() };
        id + cov[(i, j)] * prec[j]
    });
    let lu = Lu::new(&g).ok_or_else(|| Error::NumericDomain("singular moment matrix I + ΣΛ".into()))?;
    let det = lu.determinant();
    if det.value() <= 0.0 {
        return Err(Error::NumericDomain("covariance is not positive semidefinite".into()));
    }
    let ginv = lu.inverse();
    let tilted_cov = ginv.matmul(cov);
    Ok(FullFactors { ginv, tilted_cov, prec, norm: det.sqrt().recip() })
}

impl<T: Real> FullFactors<T> {
    /// Returns `(|G|^{-1/2} exp(−½ δᵀ sA₀ G⁻¹ δ), G⁻¹ δ)` for `δ = μ − c`.
    fn weight(&self, mean: &[T], center: &[T]) -> (T, Vec<T>) {
        let delta: Vec<T> = mean.iter().zip(center).map(|(&m, &c)| m - c).collect();
        let w = self.ginv.matvec(&delta);
        let pd: Vec<T> = delta.iter().zip(&self.prec).map(|(&d, &p)| d * p).collect();
        let q = T::dot(&pd, &w);
        (self.norm * (-(q * T::from_f64(0.5))).exp(), w)
    }
}

impl<T: Real> FeatureExpectations<T> {
    pub fn new(k: &KernelHyperparams<T>, basis: &[AugmentedBasisPoint<T>]) -> Result<Self> {
        check_basis(k, basis)?;
        let dim = k.dim();
        let stats = match k {
            KernelHyperparams::ExponentiatedQuadratic { signal_variance, .. } => {
                let a0 = k.precisions();
                let half = T::from_f64(0.5);
                let n = basis.len();
                let mut pairs = Vec::with_capacity(n * (n + 1) / 2);
                for a in 0..n {
                    for b in a..n {
                        let ca = &basis[a].location;
                        let cb = &basis[b].location;
                        let mid = ca.iter().zip(cb).map(|(&x, &y)| (x + y) * half).collect();
                        let half_diff: Vec<T> = ca.iter().zip(cb).map(|(&x, &y)| (x - y) * half).collect();
                        let sq: Vec<T> = half_diff.iter().zip(&a0).map(|(&h, &p)| h * h * p).collect();
                        // ¼(c_a − c_b)² = h², so the offset is −Σ h² A₀
                        let log_scale = -(sq.into_iter().sum::<T>());
                        pairs.push(PairConst { a, b, mid, half_diff, log_scale });
                    }
                }
                Stats::Eq { sf2: *signal_variance, sf4: signal_variance.square(), a0, pairs }
            }
            KernelHyperparams::Linear { weight_variances: w } => {
                let coef = basis
                    .iter()
                    .map(|b| match b.kind {
                        BasisKind::Value => w.iter().zip(&b.location).map(|(&wi, &zi)| wi * zi).collect(),
                        BasisKind::Derivative(j) => {
                            (0..dim).map(|i| if i == j { w[i] } else { T::zero() }).collect()
                        }
                    })
                    .collect();
                Stats::Linear { w: w.clone(), coef }
            }
        };
        Ok(FeatureExpectations { basis: basis.to_vec(), dim, stats })
    }

    pub fn basis(&self) -> &[AugmentedBasisPoint<T>] {
        &self.basis
    }

    fn check(&self, belief: &GaussianBelief<T>) -> Result<()> {
        if belief.dim() != self.dim {
            return Err(Error::shape(format!("belief of dimension {} for kernel of dimension {}", belief.dim(), self.dim)));
        }
        Ok(())
    }

    /// `E[φ_b(x)]` for every basis point. The belief is assumed valid.
    pub fn vec(&self, belief: &GaussianBelief<T>) -> Result<Vec<T>> {
        self.check(belief)?;
        let mu = &belief.mean;
        match &self.stats {
            Stats::Linear { coef, .. } => Ok(coef.iter().map(|c| T::dot(c, mu)).collect()),
            Stats::Eq { sf2, a0, .. } => {
                if belief.cov.is_diagonal() {
                    let f = diag_factors(a0, &belief.cov.diagonal(), 1.0);
                    let scale = *sf2 * f.norm;
                    Ok(self
                        .basis
                        .iter()
                        .map(|b| {
                            let c = &b.location;
                            let g = T::gauss_factor(scale, T::zero(), mu, c, &f.expo);
                            match b.kind {
                                BasisKind::Value => g,
                                BasisKind::Derivative(j) => g * a0[j] * f.ginv[j] * (mu[j] - c[j]),
                            }
                        })
                        .collect())
                } else {
                    let f = full_factors(a0, &belief.cov, 1.0)?;
                    Ok(self
                        .basis
                        .iter()
                        .map(|b| {
                            let (g, w) = f.weight(mu, &b.location);
                            let g = *sf2 * g;
                            match b.kind {
                                BasisKind::Value => g,
                                BasisKind::Derivative(j) => g * a0[j] * w[j],
                            }
                        })
                        .collect())
                }
            }
        }
    }

    /// Upper triangle of `E[φ_a(x) φ_b(x)]`, row-major over `a ≤ b`.
    pub fn packed_outer(&self, belief: &GaussianBelief<T>) -> Result<Vec<T>> {
        self.check(belief)?;
        let mu = &belief.mean;
        let n = self.basis.len();
        match &self.stats {
            Stats::Linear { coef, .. } => {
                let proj: Vec<T> = coef.iter().map(|c| T::dot(c, mu)).collect();
                let sc: Vec<Vec<T>> = coef.iter().map(|c| belief.cov.matvec(c)).collect();
                let mut out = Vec::with_capacity(n * (n + 1) / 2);
                for a in 0..n {
                    for b in a..n {
                        out.push(proj[a] * proj[b] + T::dot(&coef[a], &sc[b]));
                    }
                }
                Ok(out)
            }
            Stats::Eq { sf4, a0, pairs, .. } => {
                if belief.cov.is_diagonal() {
                    let var = belief.cov.diagonal();
                    let f = diag_factors(a0, &var, 2.0);
                    let scale = *sf4 * f.norm;
                    Ok(pairs
                        .iter()
                        .map(|p| {
                            let g = T::gauss_factor(scale, p.log_scale, mu, &p.mid, &f.expo);
                            let (ka, kb) = (self.basis[p.a].kind, self.basis[p.b].kind);
                            if let (BasisKind::Value, BasisKind::Value) = (ka, kb) {
                                return g;
                            }
                            // tilted mean offset from the pair midpoint
                            let shift = |d: usize| f.ginv[d] * (mu[d] - p.mid[d]);
                            match (ka, kb) {
                                (BasisKind::Value, BasisKind::Derivative(j)) => {
                                    g * (p.half_diff[j] + shift(j)) * a0[j]
                                }
                                (BasisKind::Derivative(i), BasisKind::Value) => {
                                    g * (shift(i) - p.half_diff[i]) * a0[i]
                                }
                                (BasisKind::Derivative(i), BasisKind::Derivative(j)) => {
                                    let mut m = (shift(i) - p.half_diff[i]) * (p.half_diff[j] + shift(j));
                                    if i == j {
                                        m += f.ginv[i] * var[i];
                                    }
                                    g * m * a0[i] * a0[j]
                                }
                                _ => unreachable!(),
                            }
                        })
                        .collect())
                } else {
                    let f = full_factors(a0, &belief.cov, 2.0)?;
                    Ok(pairs
                        .iter()
                        .map(|p| {
                            let (g, w) = f.weight(mu, &p.mid);
                            let g = *sf4 * p.log_scale.exp() * g;
                            // tilted mean minus each center
                            let off_a = |i: usize| w[i] - p.half_diff[i];
                            let off_b = |j: usize| w[j] + p.half_diff[j];
                            match (self.basis[p.a].kind, self.basis[p.b].kind) {
                                (BasisKind::Value, BasisKind::Value) => g,
                                (BasisKind::Value, BasisKind::Derivative(j)) => g * off_b(j) * a0[j],
                                (BasisKind::Derivative(i), BasisKind::Value) => g * off_a(i) * a0[i],
                                (BasisKind::Derivative(i), BasisKind::Derivative(j)) => {
                                    g * (off_a(i) * off_b(j) + f.tilted_cov[(i, j)]) * a0[i] * a0[j]
                                }
                            }
                        })
                        .collect())
                }
            }
        }
    }

    /// `E[φ_a(x) φ_b(x)]` as a full symmetric matrix.
    pub fn outer(&self, belief: &GaussianBelief<T>) -> Result<Mat<T>> {
        Ok(unpack_symmetric(&self.packed_outer(belief)?, self.basis.len()))
    }

    /// `E[k(x, x)]`.
    pub fn kernel_diag(&self, belief: &GaussianBelief<T>) -> Result<T> {
        self.check(belief)?;
        Ok(match &self.stats {
            Stats::Eq { sf2, .. } => *sf2,
            Stats::Linear { w, .. } => w
                .iter()
                .enumerate()
                .map(|(d, &wd)| wd * (belief.mean[d].square() + belief.cov[(d, d)]))
                .sum(),
        })
    }
}

/// Expands a row-major packed upper triangle into a symmetric matrix.
pub fn unpack_symmetric<T: Real>(packed: &[T], n: usize) -> Mat<T> {
    let mut m = Mat::zeros(n, n);
    let mut idx = 0;
    for a in 0..n {
        for b in a..n {
            m[(a, b)] = packed[idx];
            m[(b, a)] = packed[idx];
            idx += 1;
        }
    }
    m
}

/// Packs a symmetric matrix so that `Σ_ab Q_ab W_ab = dot(packed(Q), weights(W))`:
/// off-diagonal weights are doubled.
pub fn contraction_weights<T: Real>(w: &Mat<T>) -> Vec<T> {
    let n = w.rows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for a in 0..n {
        for b in a..n {
            out.push(if a == b { w[(a, a)] } else { w[(a, b)] + w[(b, a)] });
        }
    }
    out
}

/// `E[φ_b(x)]` for `x ~ belief`.
pub fn expected_feature_vec<T: Real>(
    k: &KernelHyperparams<T>,
    belief: &GaussianBelief<T>,
    basis: &[AugmentedBasisPoint<T>],
) -> Result<Vec<T>> {
    belief.validate()?;
    FeatureExpectations::new(k, basis)?.vec(belief)
}

/// `E[φ_a(x) φ_b(x)]` for `x ~ belief`.
pub fn expected_feature_outer<T: Real>(
    k: &KernelHyperparams<T>,
    belief: &GaussianBelief<T>,
    basis: &[AugmentedBasisPoint<T>],
) -> Result<Mat<T>> {
    belief.validate()?;
    FeatureExpectations::new(k, basis)?.outer(belief)
}

/// `E[k(x, x)]` for `x ~ belief`.
pub fn expected_kernel_diag<T: Real>(k: &KernelHyperparams<T>, belief: &GaussianBelief<T>) -> Result<T> {
    belief.validate()?;
    if belief.dim() != k.dim() {
        return Err(Error::shape(format!("belief of dimension {} for kernel of dimension {}", belief.dim(), k.dim())));
    }
    Ok(match k {
        KernelHyperparams::ExponentiatedQuadratic { signal_variance, .. } => *signal_variance,
        KernelHyperparams::Linear { weight_variances } => weight_variances
            .iter()
            .enumerate()
            .map(|(d, &w)| w * (belief.mean[d].square() + belief.cov[(d, d)]))
            .sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eq1(sf2: f64, ell: f64) -> KernelHyperparams<f64> {
        KernelHyperparams::exponentiated_quadratic(sf2, &[ell])
    }

    fn mixed_basis(d: usize, locs: &[Vec<f64>]) -> Vec<AugmentedBasisPoint<f64>> {
        let mut basis: Vec<_> = locs.iter().map(|l| AugmentedBasisPoint::value(l.clone())).collect();
        for j in 0..d {
            basis.extend(locs.iter().map(|l| AugmentedBasisPoint::derivative(l.clone(), j)));
        }
        basis
    }

    #[test]
    fn eq_diagonal_is_signal_variance() {
        let k = KernelHyperparams::exponentiated_quadratic(1.0, &[0.3, 2.0]);
        assert_eq!(k.eval(&[0.4, -1.0], &[0.4, -1.0]).unwrap(), 1.0);
    }

    #[test]
    fn eq_at_distance_two() {
        let v = eq1(1.0, 1.0).eval(&[0.0], &[2.0]).unwrap();
        assert!((v - (-2.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.1353).abs() < 1e-4);
    }

    #[test]
    fn linear_is_weighted_inner_product() {
        let k = KernelHyperparams::<f64>::linear(&[1.0]);
        assert_eq!(k.eval(&[3.0], &[2.0]).unwrap(), 6.0);
        assert_eq!(k.grad12(&[3.0], &[-7.0]).unwrap()[(0, 0)], 1.0);
        let k = KernelHyperparams::<f64>::linear(&[2.5]);
        assert_eq!(k.grad12(&[0.1], &[4.0]).unwrap()[(0, 0)], 2.5);
    }

    #[test]
    fn eq_gradient_vanishes_at_coincidence() {
        let k = KernelHyperparams::exponentiated_quadratic(1.7, &[0.5, 1.5]);
        assert!(k.grad1(&[0.2, 0.3], &[0.2, 0.3]).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn eq_cross_derivative_at_coincidence() {
        for ell in [0.3, 1.0, 2.5] {
            let g = eq1(1.0, ell).grad12(&[0.4], &[0.4]).unwrap()[(0, 0)];
            assert!((g - 1.0 / (ell * ell)).abs() < 1e-12);
            let h = 1e-4;
            let k = eq1(1.0, ell);
            let f = |a: f64, b: f64| k.eval(&[a], &[b]).unwrap();
            let fd = (f(0.4 + h, 0.4 + h) - f(0.4 + h, 0.4 - h) - f(0.4 - h, 0.4 + h) + f(0.4 - h, 0.4 - h)) / (4.0 * h * h);
            assert!((fd - g).abs() < 1e-5 * g.max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let k = eq1(1.0, 1.0);
        assert!(matches!(k.eval(&[0.0, 1.0], &[0.0]), Err(Error::Shape(_))));
        assert!(matches!(k.grad12(&[0.0], &[0.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_expectation_commutes_with_mean() {
        let k = KernelHyperparams::<f64>::linear(&[0.7, 1.3]);
        let belief = GaussianBelief::new(vec![0.5, -1.0], Mat::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.9])).unwrap();
        let basis = mixed_basis(2, &[vec![1.0, 2.0], vec![-0.3, 0.2]]);
        let e = expected_feature_vec(&k, &belief, &basis).unwrap();
        let p = features(&k, &belief.mean, &basis).unwrap();
        for (a, b) in e.iter().zip(&p) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn expected_kernel_diag_examples() {
        let b = GaussianBelief::diagonal(vec![1.0], &[4.0]).unwrap();
        assert_eq!(expected_kernel_diag(&KernelHyperparams::linear(&[1.0]), &b).unwrap(), 5.0);
        assert_eq!(expected_kernel_diag(&eq1(2.3, 0.4), &b).unwrap(), 2.3);
    }

    #[test]
    fn eq_value_expectation_closed_form_1d() {
        let (ell, s2) = (0.8f64, 0.3f64);
        let b = GaussianBelief::diagonal(vec![0.0], &[s2]).unwrap();
        let e = expected_feature_vec(&eq1(1.0, ell), &b, &[AugmentedBasisPoint::value(vec![0.0])]).unwrap();
        assert!((e[0] - ell / (ell * ell + s2).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn non_psd_belief_is_rejected() {
        let b = GaussianBelief { mean: vec![0.0], cov: Mat::from_diag(&[-1.0]) };
        let r = expected_feature_vec(&eq1(1.0, 1.0), &b, &[AugmentedBasisPoint::value(vec![0.0])]);
        assert!(matches!(r, Err(Error::NumericDomain(_))));
    }

    fn central(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn eq_derivatives_match_finite_differences(
            x in prop::collection::vec(-2.0f64..2.0, 2),
            z in prop::collection::vec(-2.0f64..2.0, 2),
            ell in prop::collection::vec(0.3f64..3.0, 2),
            sf2 in 0.1f64..5.0,
        ) {
            let k = KernelHyperparams::exponentiated_quadratic(sf2, &ell);
            let h = 1e-5;
            let g1 = k.grad1(&x, &z).unwrap();
            let g2 = k.grad2(&x, &z).unwrap();
            let g12 = k.grad12(&x, &z).unwrap();
            for i in 0..2 {
                prop_assert!(rel_err(g1[i], central(|v| k.eval(v, &z).unwrap(), &x, i, h)) < 1e-6);
                prop_assert!(rel_err(g2[i], central(|v| k.eval(&x, v).unwrap(), &z, i, h)) < 1e-6);
                for j in 0..2 {
                    let fd = central(|v| k.grad2(v, &z).unwrap()[j], &x, i, h);
                    prop_assert!(rel_err(g12[(i, j)], fd) < 1e-6);
                }
            }
            let swapped = k.grad2(&z, &x).unwrap();
            for i in 0..2 {
                prop_assert!((g1[i] - swapped[i]).abs() < 1e-15);
            }
            prop_assert!((k.eval(&x, &z).unwrap() - k.eval(&z, &x).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn linear_derivatives_match_finite_differences(
            x in prop::collection::vec(-2.0f64..2.0, 2),
            z in prop::collection::vec(-2.0f64..2.0, 2),
            w in prop::collection::vec(0.1f64..3.0, 2),
        ) {
            let k = KernelHyperparams::<f64>::linear(&w);
            let g1 = k.grad1(&x, &z).unwrap();
            let g12 = k.grad12(&x, &z).unwrap();
            for i in 0..2 {
                prop_assert!(rel_err(g1[i], central(|v| k.eval(v, &z).unwrap(), &x, i, 1e-5)) < 1e-6);
                for j in 0..2 {
                    let fd = central(|v| k.grad2(v, &z).unwrap()[j], &x, i, 1e-5);
                    prop_assert!(rel_err(g12[(i, j)], fd) < 1e-6);
                }
            }
        }

        #[test]
        fn zero_covariance_reduces_to_pointwise(
            mu in prop::collection::vec(-1.5f64..1.5, 2),
            locs in prop::collection::vec(prop::collection::vec(-1.5f64..1.5, 2), 1..4),
            ell in prop::collection::vec(0.3f64..2.0, 2),
            sf2 in 0.2f64..3.0,
            linear in any::<bool>(),
        ) {
            let k = if linear { KernelHyperparams::linear(&ell) } else { KernelHyperparams::exponentiated_quadratic(sf2, &ell) };
            let basis = mixed_basis(2, &locs);
            let b = GaussianBelief::point(mu.clone());
            let e = expected_feature_vec(&k, &b, &basis).unwrap();
            let q = expected_feature_outer(&k, &b, &basis).unwrap();
            let p = features(&k, &mu, &basis).unwrap();
            for a in 0..basis.len() {
                prop_assert!((e[a] - p[a]).abs() < 1e-12);
                for c in 0..basis.len() {
                    prop_assert!((q[(a, c)] - p[a] * p[c]).abs() < 1e-12);
                }
            }
            prop_assert!((expected_kernel_diag(&k, &b).unwrap() - k.eval(&mu, &mu).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn diagonal_and_full_paths_agree(
            mu in prop::collection::vec(-1.0f64..1.0, 2),
            var in prop::collection::vec(0.01f64..1.0, 2),
            locs in prop::collection::vec(prop::collection::vec(-1.5f64..1.5, 2), 1..4),
            ell in prop::collection::vec(0.3f64..2.0, 2),
        ) {
            let k = KernelHyperparams::exponentiated_quadratic(1.3, &ell);
            let basis = mixed_basis(2, &locs);
            let stats = FeatureExpectations::new(&k, &basis).unwrap();
            let diag = GaussianBelief::diagonal(mu.clone(), &var).unwrap();
            // an off-diagonal entry that is numerically zero forces the full path
            let mut cov = Mat::from_diag(&var);
            cov[(0, 1)] = 1e-300;
            cov[(1, 0)] = 1e-300;
            let full = GaussianBelief { mean: mu, cov };
            let (e1, e2) = (stats.vec(&diag).unwrap(), stats.vec(&full).unwrap());
            let (q1, q2) = (stats.packed_outer(&diag).unwrap(), stats.packed_outer(&full).unwrap());
            for (a, b) in e1.iter().zip(&e2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in q1.iter().zip(&q2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn outer_is_symmetric_psd(
            mu in prop::collection::vec(-1.0f64..1.0, 2),
            l in prop::collection::vec(-0.6f64..0.6, 3),
            locs in prop::collection::vec(prop::collection::vec(-1.5f64..1.5, 2), 1..4),
            ell in prop::collection::vec(0.3f64..2.0, 2),
        ) {
            let lower = Mat::from_row_slice(2, 2, &[l[0].abs() + 0.05, 0.0, l[1], l[2].abs() + 0.05]);
            let cov = lower.matmul(&lower.transpose()).symmetrize();
            let b = GaussianBelief::new(mu, cov).unwrap();
            let k = KernelHyperparams::exponentiated_quadratic(0.9, &ell);
            let basis = mixed_basis(2, &locs);
            let q = expected_feature_outer(&k, &b, &basis).unwrap();
            prop_assert!(q.max_abs_diff(&q.transpose()) < 1e-12);
            let n = q.rows();
            let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(n, n, q.as_slice())).eigenvalues;
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(min > -1e-10 * q.trace().max(1e-300));
            let e = expected_feature_vec(&k, &b, &basis).unwrap();
            for a in 0..n {
                prop_assert!(q[(a, a)] >= e[a] * e[a] - 1e-12);
            }
        }
    }
}
