//! Maximum-likelihood learning of the transition map (and optionally the
//! observation model) by gradient ascent on the filter log-likelihood.

mod init;
mod optim;
mod params;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad;
use crate::adf::{trial_log_likelihood, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::fpsgp::JacobianNoise;

pub use init::auto_init;
pub use optim::{fit, FitRecord, FitResult, FitStage, RestartSummary, StopReason};
pub use params::{Layout, ManifestEntry, ParameterVector, StateSpaceModel, Transform, FIELDS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    /// Reverse-mode differentiation through the filter.
    #[default]
    Reverse,
    /// Central differences in unconstrained space.
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    #[default]
    ExponentiatedQuadratic,
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotPlacement {
    /// Fit the map with every slot switched off, move slots onto the fixed
    /// points of the fitted mean map, then optimize everything jointly.
    #[default]
    MapRoots,
    /// Optimize everything jointly from the initial slots.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Iteration budget of the map-only stage under [`SlotPlacement::MapRoots`].
    pub warmup_iterations: usize,
    pub slot_placement: SlotPlacement,
    /// Adam base step size in unconstrained space.
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Halvings tried before an iteration gives up.
    pub max_step_halvings: usize,
    /// Relative objective change counted as stalled.
    pub tolerance: f64,
    /// Consecutive stalled iterations before stopping.
    pub patience: usize,
    pub gradient: GradientMethod,
    pub fd_step: f64,
    pub seed: u64,
    pub freeze: Vec<String>,
    pub inducing_points: usize,
    pub fixed_points: usize,
    /// Total optimizer runs; the best final objective is kept.
    pub restarts: usize,
    /// Latent dimension, defaulting to the number of observed channels.
    pub latent_dim: Option<usize>,
    pub kernel: KernelChoice,
    pub jacobian_noise: JacobianNoise,
    /// Observation noise as a fraction of the data scale; frozen by default.
    pub obs_noise_fraction: f64,
    /// Initial inducing-value noise as a fraction of the data scale.
    pub inducing_noise_fraction: f64,
    /// Initial fixed-point location noise as a fraction of the data scale.
    pub fixed_point_noise_fraction: f64,
    /// Location noise given to slots placed on mean-map roots, as a fraction
    /// of the data scale.
    pub placed_slot_noise_fraction: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iterations: 300,
            warmup_iterations: 300,
            slot_placement: SlotPlacement::MapRoots,
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_step_halvings: 5,
            tolerance: 1e-6,
            patience: 10,
            gradient: GradientMethod::Reverse,
            fd_step: 1e-5,
            seed: 0,
            freeze: vec!["obs.loading".into(), "obs.noise_std".into(), "inducing.noise_std".into()],
            inducing_points: 16,
            fixed_points: 5,
            restarts: 3,
            latent_dim: None,
            kernel: KernelChoice::ExponentiatedQuadratic,
            jacobian_noise: JacobianNoise::Tied,
            obs_noise_fraction: 0.01,
            inducing_noise_fraction: 0.05,
            fixed_point_noise_fraction: 1.0,
            placed_slot_noise_fraction: 0.1,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.inducing_points == 0 {
            return bad("inducing_points must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.tolerance > 0.0 && self.epsilon > 0.0 && self.fd_step > 0.0) {
            return bad("learning_rate, tolerance, epsilon and fd_step must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if self.latent_dim == Some(0) {
            return bad("latent_dim must be at least 1");
        }
        let fractions = [
            self.obs_noise_fraction,
            self.inducing_noise_fraction,
            self.fixed_point_noise_fraction,
            self.placed_slot_noise_fraction,
        ];
        if !fractions.iter().all(|f| *f > 0.0 && f.is_finite()) {
            return bad("noise fractions must be positive and finite");
        }
        Ok(())
    }
}

/// Names the first non-finite constrained field, if any.
fn non_finite_field(theta: &ParameterVector, values: &[f64]) -> Option<String> {
    theta.manifest.iter().find_map(|e| {
        let bad = values[e.offset..e.offset + e.len].iter().any(|&u| match e.transform {
            Transform::Identity => !u.is_finite(),
            Transform::Log => !u.exp().is_finite() || u.exp() == 0.0,
        });
        bad.then(|| e.name.clone())
    })
}

fn check_value(theta: &ParameterVector, values: &[f64], total: f64) -> Result<f64> {
    if total.is_finite() {
        return Ok(total);
    }
    let field = non_finite_field(theta, values).unwrap_or_else(|| "log_likelihood".into());
    Err(Error::Evaluation { field, message: format!("objective evaluated to {total}") })
}

fn objective_at(theta: &ParameterVector, values: &[f64], data: &TrajectoryDataset) -> Result<f64> {
    if let Some(field) = non_finite_field(theta, values) {
        return Err(Error::Evaluation { field, message: "parameter out of range".into() });
    }
    let model = theta.unpack(values);
    model.validate()?;
    let dynamics = model.transition.dynamics()?;
    let parts: Vec<Result<f64>> = data
        .trials
        .par_iter()
        .enumerate()
        .map(|(n, tr)| {
            trial_log_likelihood(&dynamics, &model.observation, &model.init, &tr.observations)
                .map_err(|e| e.annotate(&format!("trial {n}")))
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    check_value(theta, values, total)
}

/// Log marginal likelihood of `data` under the model packed in `theta`.
pub fn objective(theta: &ParameterVector, data: &TrajectoryDataset) -> Result<f64> {
    data.validate()?;
    objective_at(theta, &theta.values, data)
}

fn reverse_at(
    theta: &ParameterVector,
    values: &[f64],
    data: &TrajectoryDataset,
    active: &[bool],
) -> Result<(f64, Vec<f64>)> {
    if let Some(field) = non_finite_field(theta, values) {
        return Err(Error::Evaluation { field, message: "parameter out of range".into() });
    }
    let parts: Vec<Result<(f64, Vec<f64>)>> = data
        .trials
        .par_iter()
        .enumerate()
        .map(|(n, tr)| {
            ad::value_and_gradient(values, active, |vars| {
                let model = theta.unpack(vars);
                let dynamics = model.transition.dynamics()?;
                trial_log_likelihood(&dynamics, &model.observation, &model.init, &tr.observations)
            })
            .map_err(|e: Error| e.annotate(&format!("trial {n}")))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; values.len()];
    for p in parts {
        let (v, g) = p?;
        total += v;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let total = check_value(theta, values, total)?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Evaluation { field: theta.field_of(i).into(), message: "non-finite gradient".into() });
    }
    Ok((total, grad))
}

fn finite_difference_at(
    theta: &ParameterVector,
    values: &[f64],
    data: &TrajectoryDataset,
    active: &[bool],
    step: f64,
) -> Result<Vec<f64>> {
    let coords: Vec<Result<f64>> = (0..values.len())
        .into_par_iter()
        .map(|i| {
            if !active[i] {
                return Ok(0.0);
            }
            let mut up = values.to_vec();
            let mut down = values.to_vec();
            up[i] += step;
            down[i] -= step;
            Ok((objective_at(theta, &up, data)? - objective_at(theta, &down, data)?) / (2.0 * step))
        })
        .collect();
    coords.into_iter().collect()
}

/// Central finite-difference gradient of the objective (step `config.fd_step`); frozen coordinates are 0.
pub fn finite_difference_gradient(theta: &ParameterVector, data: &TrajectoryDataset, config: &FitConfig) -> Result<Vec<f64>> {
    data.validate()?;
    let active = theta.active_mask(&config.freeze)?;
    objective_at(theta, &theta.values, data)?;
    finite_difference_at(theta, &theta.values, data, &active, config.fd_step)
}

/// Objective value and gradient with the method and freeze list from `config`.
pub fn value_and_gradient(theta: &ParameterVector, data: &TrajectoryDataset, config: &FitConfig) -> Result<(f64, Vec<f64>)> {
    data.validate()?;
    let active = theta.active_mask(&config.freeze)?;
    eval_with_gradient(theta, &theta.values, data, &active, config)
}

/// Gradient of the objective with respect to the unconstrained parameters.
pub fn gradient(theta: &ParameterVector, data: &TrajectoryDataset, config: &FitConfig) -> Result<Vec<f64>> {
    value_and_gradient(theta, data, config).map(|(_, g)| g)
}

pub(crate) fn eval_with_gradient(
    theta: &ParameterVector,
    values: &[f64],
    data: &TrajectoryDataset,
    active: &[bool],
    config: &FitConfig,
) -> Result<(f64, Vec<f64>)> {
    match config.gradient {
        GradientMethod::Reverse => reverse_at(theta, values, data, active),
        GradientMethod::FiniteDifference => {
            let v = objective_at(theta, values, data)?;
            Ok((v, finite_difference_at(theta, values, data, active, config.fd_step)?))
        }
    }
}

pub(crate) fn eval(theta: &ParameterVector, values: &[f64], data: &TrajectoryDataset) -> Result<f64> {
    objective_at(theta, values, data)
}
