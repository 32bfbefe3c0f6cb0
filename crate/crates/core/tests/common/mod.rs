#![allow(dead_code)]

use fpgp::belief::GaussianBelief;
use fpgp::kernels::{expected_feature_outer, expected_feature_vec, expected_kernel_diag, features, AugmentedBasisPoint, KernelHyperparams};
use fpgp::linalg::{Cholesky, Mat};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn sample_gaussian(rng: &mut impl Rng, mean: &[f64], chol: &Mat<f64>) -> Vec<f64> {
    let z: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
    let lz = chol.matvec(&z);
    mean.iter().zip(lz).map(|(m, v)| m + v).collect()
}

/// Lower factor of a PSD matrix; zero rows and columns are kept at zero.
pub fn psd_factor(cov: &Mat<f64>) -> Mat<f64> {
    let n = cov.rows();
    let mut shifted = cov.clone();
    for i in 0..n {
        shifted[(i, i)] += 1e-300;
    }
    match Cholesky::new(&shifted) {
        Some(c) => c.factor().clone(),
        None => Mat::from_fn(n, n, |i, j| if i == j { cov[(i, i)].max(0.0).sqrt() } else { 0.0 }),
    }
}

/// Running mean and standard error.
#[derive(Default, Clone)]
pub struct Moments {
    n: f64,
    sum: f64,
    sumsq: f64,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sumsq += v * v;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n
    }

    pub fn std_err(&self) -> f64 {
        let m = self.mean();
        ((self.sumsq / self.n - m * m).max(0.0) / (self.n - 1.0)).sqrt()
    }

    /// `|value − mean| ≤ k·SE`, with a floor for statistics that have no spread.
    pub fn agrees(&self, value: f64, k: f64) -> bool {
        (value - self.mean()).abs() <= k * self.std_err() + 1e-12 * (1.0 + value.abs())
    }
}

/// Counts of Monte-Carlo comparisons within three standard errors.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleTally {
    pub vec_ok: usize,
    pub vec_total: usize,
    pub outer_ok: usize,
    pub outer_total: usize,
    pub diag_ok: bool,
}

impl OracleTally {
    pub fn all_ok(&self) -> bool {
        self.vec_ok == self.vec_total && self.outer_ok == self.outer_total && self.diag_ok
    }
}

pub fn monte_carlo_expectations(
    k: &KernelHyperparams<f64>,
    belief: &GaussianBelief<f64>,
    basis: &[AugmentedBasisPoint<f64>],
    samples: usize,
    rng: &mut impl Rng,
) -> OracleTally {
    let e = expected_feature_vec(k, belief, basis).unwrap();
    let q = expected_feature_outer(k, belief, basis).unwrap();
    let kd = expected_kernel_diag(k, belief).unwrap();
    let n = basis.len();
    let chol = psd_factor(&belief.cov);
    let mut mv = vec![Moments::default(); n];
    let mut mq = vec![Moments::default(); n * n];
    let mut md = Moments::default();
    for _ in 0..samples {
        let x = sample_gaussian(rng, &belief.mean, &chol);
        let phi = features(k, &x, basis).unwrap();
        for a in 0..n {
            mv[a].push(phi[a]);
            for b in a..n {
                mq[a * n + b].push(phi[a] * phi[b]);
            }
        }
        md.push(k.eval(&x, &x).unwrap());
    }
    let mut t = OracleTally { diag_ok: md.agrees(kd, 3.0), ..Default::default() };
    for a in 0..n {
        t.vec_total += 1;
        t.vec_ok += mv[a].agrees(e[a], 3.0) as usize;
        for b in a..n {
            t.outer_total += 1;
            t.outer_ok += mq[a * n + b].agrees(q[(a, b)], 3.0) as usize;
        }
    }
    t
}

/// Random kernel, belief and mixed value/derivative basis.
pub fn random_expectation_config(
    rng: &mut impl Rng,
    linear: bool,
) -> (KernelHyperparams<f64>, GaussianBelief<f64>, Vec<AugmentedBasisPoint<f64>>) {
    let d = rng.random_range(1..=2usize);
    let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.4..1.5)).collect();
    let k = if linear {
        KernelHyperparams::linear(&scales)
    } else {
        KernelHyperparams::exponentiated_quadratic(rng.random_range(0.5..2.0), &scales)
    };
    let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let l = Mat::from_fn(d, d, |i, j| {
        if i == j {
            rng.random_range(0.1..0.6)
        } else if i > j {
            rng.random_range(-0.3..0.3)
        } else {
            0.0
        }
    });
    let cov = l.matmul(&l.transpose()).symmetrize();
    let belief = GaussianBelief::new(mean, cov).unwrap();
    let mut basis = Vec::new();
    for _ in 0..2 {
        let loc: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        basis.push(AugmentedBasisPoint::value(loc.clone()));
        for j in 0..d {
            basis.push(AugmentedBasisPoint::derivative(loc.clone(), j));
        }
    }
    (k, belief, basis)
}

/// Textbook Kalman measurement update on nalgebra types.
pub fn textbook_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>, f64) {
    let s = c * cov * c.transpose() + r;
    let s_inv = s.clone().try_inverse().unwrap();
    let gain = cov * c.transpose() * &s_inv;
    let innov = y - c * mean;
    let m = mean + &gain * &innov;
    let n = mean.len();
    let p = (DMatrix::identity(n, n) - &gain * c) * cov;
    let p = (&p + p.transpose()) * 0.5;
    let dy = y.len() as f64;
    let ll = -0.5 * (dy * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + (innov.transpose() * &s_inv * &innov)[(0, 0)]);
    (m, p, ll)
}

pub fn to_na(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Linear-kernel transition realizing `x ↦ diag(a) x` through one inducing
/// point per axis with negligible value noise, plus process noise `q`.
/// Inducing points sit far out on the axes so the gram jitter leaves a
/// predictive variance below `1e-10·|x|²`.
pub fn linear_gp_model(a: &[f64], q: &[f64]) -> fpgp::TransitionModel {
    use fpgp::fpsgp::{FixedPointSet, TransitionModel};
    use fpgp::sgp::InducingSet;
    let d = a.len();
    let z = Mat::from_fn(d, d, |i, j| if i == j { 10.0 } else { 0.0 });
    let u = Mat::from_fn(d, d, |i, j| if i == j { 10.0 * a[j] } else { 0.0 });
    let kernel = KernelHyperparams::linear(&vec![1.0; d]);
    TransitionModel::new(kernel, InducingSet::new(z, u, vec![1e-7; d]).unwrap(), FixedPointSet::empty(d))
        .unwrap()
        .with_process_noise(q.iter().map(|v| v.sqrt()).collect())
}

pub struct KalmanRun {
    pub predicted: Vec<(DVector<f64>, DMatrix<f64>)>,
    pub filtered: Vec<(DVector<f64>, DMatrix<f64>)>,
    pub log_likelihood: f64,
}

/// Exact Kalman filter with `x^t = A x^{t−1} + N(0, Q)`, `y^t = C x^t + N(0, R)`,
/// starting from the belief on `x^0`.
#[allow(clippy::too_many_arguments)]
pub fn exact_kalman(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
    ys: &[DVector<f64>],
) -> KalmanRun {
    let (mut m, mut p) = (m0.clone(), p0.clone());
    let mut run = KalmanRun { predicted: Vec::new(), filtered: Vec::new(), log_likelihood: 0.0 };
    for y in ys {
        let mp = a * &m;
        let pp = a * &p * a.transpose() + q;
        let (mu, pu, ll) = textbook_update(&mp, &pp, y, c, r);
        run.predicted.push((mp, pp));
        run.filtered.push((mu.clone(), pu.clone()));
        run.log_likelihood += ll;
        m = mu;
        p = pu;
    }
    run
}

/// Largest absolute deviation of the filter on [`linear_gp_model`] from exact
/// Kalman filtering, over predicted and filtered moments and the log-likelihood.
pub fn kalman_filter_error(
    a: &[f64],
    q: &[f64],
    obs: &fpgp::adf::ObservationModel<f64>,
    init: &fpgp::adf::LatentInit<f64>,
    ys: &Mat<f64>,
) -> f64 {
    let model = linear_gp_model(a, q);
    let out = fpgp::adf::filter_trial(&model, obs, init, ys).unwrap();
    let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_row_slice(v));
    let r: Vec<f64> = obs.noise_std.iter().map(|s| s * s).collect();
    let rows: Vec<DVector<f64>> = (0..ys.rows()).map(|t| DVector::from_row_slice(ys.row(t))).collect();
    let truth = exact_kalman(
        &diag(a),
        &diag(q),
        &to_na(&obs.loading),
        &diag(&r),
        &DVector::from_row_slice(&init.mean),
        &diag(&init.var),
        &rows,
    );
    let mut err = (out.log_likelihood - truth.log_likelihood).abs();
    for t in 0..rows.len() {
        for (ours, (m, p)) in [(&out.predicted[t], &truth.predicted[t]), (&out.filtered[t], &truth.filtered[t])] {
            for i in 0..a.len() {
                err = err.max((ours.mean[i] - m[i]).abs());
                for j in 0..a.len() {
                    err = err.max((ours.cov[(i, j)] - p[(i, j)]).abs());
                }
            }
        }
    }
    err
}
