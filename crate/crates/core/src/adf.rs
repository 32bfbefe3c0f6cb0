//! Assumed density filtering through a linear-Gaussian observation model and
//! the resulting log marginal likelihood.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::fpsgp::{Dynamics, TransitionModel};
use crate::linalg::{Cholesky, Mat};
use crate::scalar::{lift, Real};

/// `y = C x + η`, `η ~ N(0, diag(σ^η)²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel<T> {
    /// `D_y × D_x`
    pub loading: Mat<T>,
    pub noise_std: Vec<T>,
}

impl<T: Real> ObservationModel<T> {
    pub fn new(loading: Mat<T>, noise_std: Vec<T>) -> Result<Self> {
        let o = ObservationModel { loading, noise_std };
        o.validate()?;
        Ok(o)
    }

    /// `C = [I; 0]` with a common noise level.
    pub fn identity(dim_y: usize, dim_x: usize, noise_std: f64) -> Self {
        ObservationModel {
            loading: Mat::from_fn(dim_y, dim_x, |i, j| if i == j { T::one() } else { T::zero() }),
            noise_std: vec![T::from_f64(noise_std); dim_y],
        }
    }

    pub fn dim_x(&self) -> usize {
        self.loading.cols()
    }

    pub fn dim_y(&self) -> usize {
        self.loading.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std.len() != self.dim_y() {
            return Err(Error::shape(format!("{} noise entries for {} observed channels", self.noise_std.len(), self.dim_y())));
        }
        if self.dim_x() > self.dim_y() {
            return Err(Error::shape(format!("latent dimension {} exceeds observed dimension {}", self.dim_x(), self.dim_y())));
        }
        if let Some(s) = self.noise_std.iter().find(|s| !(s.value() > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!("observation noise std must be positive, got {}", s.value())));
        }
        if !self.loading.is_finite() {
            return Err(Error::InvalidParameter("loading matrix contains non-finite entries".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self, f: impl Fn(T) -> U + Copy) -> ObservationModel<U> {
        ObservationModel { loading: self.loading.map(f), noise_std: self.noise_std.iter().map(|&v| f(v)).collect() }
    }
}

/// Belief over the latent state before the first observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentInit<T> {
    pub mean: Vec<T>,
    /// Diagonal of `Σ0`.
    pub var: Vec<T>,
}

impl<T: Real> LatentInit<T> {
    pub fn new(mean: Vec<T>, var: Vec<T>) -> Result<Self> {
        let i = LatentInit { mean, var };
        i.validate()?;
        Ok(i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.var.len() {
            return Err(Error::shape(format!("initial mean has {} entries, variance {}", self.mean.len(), self.var.len())));
        }
        if let Some(v) = self.var.iter().find(|v| !(v.value() >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("initial variance must be non-negative, got {}", v.value())));
        }
        Ok(())
    }

    pub fn belief(&self) -> GaussianBelief<T> {
        GaussianBelief { mean: self.mean.clone(), cov: Mat::from_diag(&self.var) }
    }

    pub fn cast<U: Real>(&self, f: impl Fn(T) -> U + Copy) -> LatentInit<U> {
        LatentInit { mean: self.mean.iter().map(|&v| f(v)).collect(), var: self.var.iter().map(|&v| f(v)).collect() }
    }
}

/// One recorded trajectory: row `t − 1` holds `y^t`, `t = 1..T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub observations: Mat<f64>,
    pub control: Option<f64>,
}

/// Repeated observed trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub trials: Vec<Trial>,
}

impl TrajectoryDataset {
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        let d = TrajectoryDataset { trials };
        d.validate()?;
        Ok(d)
    }

    pub fn from_observations(obs: Vec<Mat<f64>>) -> Result<Self> {
        Self::new(obs.into_iter().map(|observations| Trial { observations, control: None }).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.trials.first().ok_or_else(|| Error::InvalidParameter("dataset has no trials".into()))?;
        let dy = first.observations.cols();
        if dy == 0 {
            return Err(Error::InvalidParameter("dataset has no observed channels".into()));
        }
        for (n, tr) in self.trials.iter().enumerate() {
            if tr.observations.cols() != dy {
                return Err(Error::shape(format!("trial {n} has {} channels, expected {dy}", tr.observations.cols())));
            }
            if tr.observations.rows() < 2 {
                return Err(Error::InvalidParameter(format!("trial {n} has fewer than 2 steps")));
            }
            if !tr.observations.is_finite() {
                return Err(Error::InvalidParameter(format!("trial {n} contains non-finite observations")));
            }
        }
        Ok(())
    }

    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }

    pub fn dim_y(&self) -> usize {
        self.trials[0].observations.cols()
    }

    /// Every observation vector, trial by trial.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.trials.iter().flat_map(|t| (0..t.observations.rows()).map(move |i| t.observations.row(i)))
    }

    /// Consecutive observation pairs `(y^t, y^{t+1})` within trials.
    pub fn transitions(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.trials.iter().flat_map(|t| {
            (1..t.observations.rows()).map(move |i| (t.observations.row(i - 1), t.observations.row(i)))
        })
    }

    /// Mean over channels of the per-channel standard deviation.
    pub fn pooled_std(&self) -> f64 {
        let dy = self.dim_y();
        let n = self.rows().count() as f64;
        let mut mean = vec![0.0; dy];
        for r in self.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dy];
        for r in self.rows() {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        var.iter().map(|v| v.sqrt()).sum::<f64>() / dy as f64
    }
}

/// Kalman measurement update. Returns the posterior and `log N(y; Cμ, Σ^fwd)`.
pub fn update<T: Real>(
    pred: &GaussianBelief<T>,
    y: &[T],
    obs: &ObservationModel<T>,
) -> Result<(GaussianBelief<T>, T)> {
    let (dx, dy) = (obs.dim_x(), obs.dim_y());
    if pred.dim() != dx || y.len() != dy {
        return Err(Error::shape(format!(
            "update with belief of dimension {}, observation of length {}, model {dy}x{dx}",
            pred.dim(),
            y.len()
        )));
    }
    let c = &obs.loading;
    // Σ Cᵀ
    let sct = pred.cov.matmul(&c.transpose());
    let mut s_fwd = c.matmul(&sct);
    for (e, s) in obs.noise_std.iter().enumerate() {
        s_fwd[(e, e)] += s.square();
    }
    let s_fwd = s_fwd.symmetrize();
    let chol = Cholesky::new(&s_fwd).ok_or_else(|| Error::conditioning("innovation covariance"))?;
    let pred_y = c.matvec(&pred.mean);
    let resid: Vec<T> = y.iter().zip(&pred_y).map(|(&a, &b)| a - b).collect();
    let white = chol.forward(&resid);
    let log_lik = T::from_f64(-0.5) * (T::from_f64(dy as f64 * (2.0 * PI).ln()) + chol.log_det() + T::dot(&white, &white));
    let sol = chol.solve(&resid);
    let mean: Vec<T> = pred.mean.iter().zip(sct.matvec(&sol)).map(|(&m, k)| m + k).collect();
    // Σ − ΣCᵀ Σfwd⁻¹ CΣ
    let gain_t = chol.solve_mat(&sct.transpose());
    let cov = pred.cov.sub(&sct.matmul(&gain_t)).symmetrize();
    Ok((GaussianBelief { mean, cov }, log_lik))
}

/// Zeroes off-diagonal covariance entries.
pub fn diagonalize<T: Real>(belief: &GaussianBelief<T>) -> GaussianBelief<T> {
    belief.diagonalize()
}

/// Beliefs produced while filtering one trial.
#[derive(Clone, Debug)]
pub struct FilterOutput<T> {
    /// Propagated beliefs `p(x^t | y^{1..t−1})`.
    pub predicted: Vec<GaussianBelief<T>>,
    /// Updated beliefs with full covariance, before diagonalization.
    pub filtered: Vec<GaussianBelief<T>>,
    pub log_likelihood: T,
}

fn check_filter<T: Real>(post: &Dynamics<T>, obs: &ObservationModel<T>, init: &LatentInit<T>, y: &Mat<f64>) -> Result<()> {
    obs.validate()?;
    init.validate()?;
    if post.dim() != obs.dim_x() || init.mean.len() != obs.dim_x() || y.cols() != obs.dim_y() {
        return Err(Error::shape(format!(
            "model dimension {}, observation model {}x{}, initial belief {}, data channels {}",
            post.dim(),
            obs.dim_y(),
            obs.dim_x(),
            init.mean.len(),
            y.cols()
        )));
    }
    Ok(())
}

/// Runs propagate, update and diagonalize over `y^1..y^T`.
pub fn filter_with<T: Real>(
    post: &Dynamics<T>,
    obs: &ObservationModel<T>,
    init: &LatentInit<T>,
    y: &Mat<f64>,
) -> Result<FilterOutput<T>> {
    check_filter(post, obs, init, y)?;
    let mut belief = init.belief();
    let mut out = FilterOutput { predicted: Vec::new(), filtered: Vec::new(), log_likelihood: T::zero() };
    for t in 0..y.rows() {
        let at = |e: Error| e.annotate(&format!("t={}", t + 1));
        let pred = post.predict_moments(&belief).map_err(at)?;
        let (upd, ll) = update(&pred, &lift(y.row(t)), obs).map_err(at)?;
        out.log_likelihood += ll;
        belief = upd.diagonalize();
        out.predicted.push(pred);
        out.filtered.push(upd);
    }
    if !out.log_likelihood.is_finite() {
        return Err(Error::Evaluation { field: "log_likelihood".into(), message: "non-finite trial log-likelihood".into() });
    }
    Ok(out)
}

/// Log-likelihood of one trial without keeping the beliefs.
pub fn trial_log_likelihood<T: Real>(
    post: &Dynamics<T>,
    obs: &ObservationModel<T>,
    init: &LatentInit<T>,
    y: &Mat<f64>,
) -> Result<T> {
    check_filter(post, obs, init, y)?;
    let mut belief = init.belief();
    let mut total = T::zero();
    for t in 0..y.rows() {
        let at = |e: Error| e.annotate(&format!("t={}", t + 1));
        let pred = post.predict_moments(&belief).map_err(at)?;
        let (upd, ll) = update(&pred, &lift(y.row(t)), obs).map_err(at)?;
        total += ll;
        belief = upd.diagonalize();
    }
    Ok(total)
}

/// Filters one trial under `model`.
pub fn filter_trial<T: Real>(
    model: &TransitionModel<T>,
    obs: &ObservationModel<T>,
    init: &LatentInit<T>,
    y: &Mat<f64>,
) -> Result<FilterOutput<T>> {
    filter_with(&model.dynamics()?, obs, init, y)
}

/// `Σ_n Σ_t log p(y^{t,n} | y^{1..t−1,n})`, summed in trial order.
pub fn log_marginal_likelihood<T: Real>(
    model: &TransitionModel<T>,
    obs: &ObservationModel<T>,
    init: &LatentInit<T>,
    data: &TrajectoryDataset,
) -> Result<T> {
    data.validate()?;
    let post = model.dynamics()?;
    let mut total = T::zero();
    for (n, trial) in data.trials.iter().enumerate() {
        total += trial_log_likelihood(&post, obs, init, &trial.observations)
            .map_err(|e| e.annotate(&format!("trial {n}")))?;
    }
    if !total.is_finite() {
        return Err(Error::Evaluation { field: "log_likelihood".into(), message: "non-finite objective".into() });
    }
    Ok(total)
}
