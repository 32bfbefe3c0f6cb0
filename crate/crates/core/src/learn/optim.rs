//! Adam ascent with step halving and independent restarts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::init::{auto_init, perturb, place_slots, switch_off_slots};
use super::{eval, eval_with_gradient, FitConfig, ParameterVector, SlotPlacement, StateSpaceModel};
use crate::adf::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStage {
    /// Map-only fit with every fixed-point slot switched off.
    Warmup,
    Joint,
}

impl FitStage {
    pub fn as_str(self) -> &'static str {
        match self {
            FitStage::Warmup => "warmup",
            FitStage::Joint => "joint",
        }
    }
}

/// One accepted optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub restart: usize,
    pub stage: FitStage,
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// No halving of the step increased the objective.
    Stalled,
    /// Every halving produced a non-finite or failing objective.
    NonFinite,
    /// The starting point could not be evaluated.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    /// Final objective of the map-only stage, when it ran.
    pub warmup_objective: Option<f64>,
    pub initial_objective: Option<f64>,
    pub objective: Option<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: StateSpaceModel<f64>,
    pub objective: f64,
    /// Accepted objective values of the winning restart's joint stage,
    /// starting point first.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub best_restart: usize,
    pub restarts: Vec<RestartSummary>,
    pub records: Vec<FitRecord>,
    pub evaluations: usize,
}

struct Run {
    values: Vec<f64>,
    trace: Vec<f64>,
    records: Vec<FitRecord>,
    summary: RestartSummary,
    evaluations: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn run(
    restart: usize,
    stage: FitStage,
    theta: &ParameterVector,
    active: &[bool],
    data: &TrajectoryDataset,
    config: &FitConfig,
    max_iterations: usize,
) -> Run {
    let mut summary = RestartSummary {
        restart,
        warmup_objective: None,
        initial_objective: None,
        objective: None,
        iterations: 0,
        stop: StopReason::Failed,
        message: None,
    };
    let mut values = theta.values.clone();
    let (mut obj, mut grad) = match eval_with_gradient(theta, &values, data, active, config) {
        Ok(v) => v,
        Err(e) => {
            summary.message = Some(e.to_string());
            return Run { values, trace: Vec::new(), records: Vec::new(), summary, evaluations: 1 };
        }
    };
    let mut evaluations = 1;
    summary.initial_objective = Some(obj);
    let mut trace = vec![obj];
    let mut records = Vec::new();
    let n = values.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut step_scale = 1.0;
    let mut adam_t = 0;
    let mut stalls = 0;
    let mut quiet = 0;
    let mut stop = StopReason::MaxIterations;
    for it in 1..=max_iterations {
        adam_t += 1;
        for i in 0..n {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
        }
        let c1 = 1.0 - config.beta1.powi(adam_t);
        let c2 = 1.0 - config.beta2.powi(adam_t);
        let dir: Vec<f64> = (0..n)
            .map(|i| if active[i] { (m[i] / c1) / ((v[i] / c2).sqrt() + config.epsilon) } else { 0.0 })
            .collect();
        let mut accepted = None;
        let mut last_error = None;
        let mut any_finite = false;
        for _ in 0..=config.max_step_halvings {
            let step = config.learning_rate * step_scale;
            let cand: Vec<f64> = values.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
            evaluations += 1;
            match eval_with_gradient(theta, &cand, data, active, config) {
                Ok((o, g)) if o >= obj => {
                    accepted = Some((cand, o, g, step));
                    break;
                }
                Ok(_) => any_finite = true,
                Err(e) => last_error = Some(e.to_string()),
            }
            step_scale *= 0.5;
        }
        let Some((cand, o, g, step)) = accepted else {
            if any_finite {
                // Stale moments can point downhill; restart them once from the current gradient.
                stalls += 1;
                if stalls < 2 {
                    m.iter_mut().for_each(|x| *x = 0.0);
                    v.iter_mut().for_each(|x| *x = 0.0);
                    adam_t = 0;
                    continue;
                }
                stop = StopReason::Stalled;
            } else {
                stop = StopReason::NonFinite;
                summary.message = last_error;
            }
            break;
        };
        stalls = 0;
        let rel = (o - obj) / obj.abs().max(1.0);
        values = cand;
        obj = o;
        grad = g;
        trace.push(obj);
        summary.iterations = it;
        let record = FitRecord { restart, stage, iteration: it, objective: obj, grad_norm: norm(&grad), step };
        log::info!(
            "restart={} stage={} iteration={} objective={:.6} grad_norm={:.3e} step={:.3e}",
            record.restart,
            record.stage.as_str(),
            record.iteration,
            record.objective,
            record.grad_norm,
            record.step
        );
        records.push(record);
        step_scale = (step_scale * 1.5).min(1.0);
        quiet = if rel < config.tolerance { quiet + 1 } else { 0 };
        if quiet >= config.patience.max(1) {
            stop = StopReason::Converged;
            break;
        }
    }
    summary.objective = Some(obj);
    summary.stop = stop;
    Run { values, trace, records, summary, evaluations }
}

/// Warm-up (when `warm`), slot placement and joint stage for one start.
fn run_restart(
    restart: usize,
    theta: &ParameterVector,
    active: &[bool],
    warm: bool,
    data: &TrajectoryDataset,
    config: &FitConfig,
) -> Run {
    if !warm {
        return run(restart, FitStage::Joint, theta, active, data, config, config.max_iterations);
    }
    let fail = |warmup: Run, message: String| {
        let mut failed = warmup;
        failed.summary.warmup_objective = failed.summary.objective.take();
        failed.summary.stop = StopReason::Failed;
        failed.summary.message = Some(message);
        failed
    };
    let start = theta.model();
    let off = match ParameterVector::pack(&switch_off_slots(&start, data.pooled_std().max(1e-12))) {
        Ok(pv) => pv,
        Err(e) => return fail(run(restart, FitStage::Warmup, theta, active, data, config, 0), e.to_string()),
    };
    let map_only: Vec<bool> = active
        .iter()
        .enumerate()
        .map(|(i, &a)| a && !off.field_of(i).starts_with("fixed_points."))
        .collect();
    let warmup = run(restart, FitStage::Warmup, &off, &map_only, data, config, config.warmup_iterations);
    if warmup.summary.objective.is_none() {
        return warmup;
    }
    let placed = place_slots(&off.with_values(warmup.values.clone()).model(), data, config)
        .and_then(|m| ParameterVector::pack(&m));
    let placed = match placed {
        Ok(pv) => pv,
        Err(e) => {
            let message = e.to_string();
            return fail(warmup, message);
        }
    };
    let mut joint = run(restart, FitStage::Joint, &placed, active, data, config, config.max_iterations);
    joint.summary.warmup_objective = warmup.summary.objective;
    joint.evaluations += warmup.evaluations;
    let mut records = warmup.records;
    records.append(&mut joint.records);
    joint.records = records;
    joint
}

/// Maximizes the log marginal likelihood.
///
/// Restart 0 starts from `init` (or [`auto_init`]); restart `k ≥ 1` starts
/// from a perturbation drawn from the `restart-k` substream. Under
/// [`SlotPlacement::MapRoots`] each restart first fits the map with the slots
/// switched off and then places them on the fixed points of that map; this
/// needs every fixed-point field to be learnable and is skipped otherwise.
/// The restart with the highest final objective wins, ties going to the
/// lower index.
pub fn fit(
    data: &TrajectoryDataset,
    config: &FitConfig,
    init: Option<&StateSpaceModel<f64>>,
) -> Result<FitResult> {
    data.validate()?;
    config.validate()?;
    let start = match init {
        Some(m) => m.clone(),
        None => auto_init(data, config)?,
    };
    let theta = ParameterVector::pack(&start)?;
    let active = theta.active_mask(&config.freeze)?;
    if !active.iter().any(|&a| a) {
        let obj = eval(&theta, &theta.values, data)?;
        let summary = RestartSummary {
            restart: 0,
            warmup_objective: None,
            initial_objective: Some(obj),
            objective: Some(obj),
            iterations: 0,
            stop: StopReason::Converged,
            message: None,
        };
        return Ok(FitResult {
            model: start,
            objective: obj,
            trace: vec![obj],
            iterations: 0,
            best_restart: 0,
            restarts: vec![summary],
            records: Vec::new(),
            evaluations: 1,
        });
    }
    let starts: Vec<ParameterVector> = (0..config.restarts)
        .map(|k| {
            if k == 0 {
                Ok(theta.clone())
            } else {
                let mut rng = substream(config.seed, &format!("restart-{k}"));
                let moved = perturb(&start, data, &mut rng);
                let mut pv = ParameterVector::pack(&moved)?;
                for (i, a) in active.iter().enumerate() {
                    if !a {
                        pv.values[i] = theta.values[i];
                    }
                }
                Ok(pv)
            }
        })
        .collect::<Result<_>>()?;
    let slot_coords: Vec<usize> =
        (0..theta.len()).filter(|&i| theta.field_of(i).starts_with("fixed_points.")).collect();
    let warm = config.slot_placement == SlotPlacement::MapRoots
        && !slot_coords.is_empty()
        && slot_coords.iter().all(|&i| active[i]);
    let runs: Vec<Run> =
        starts.par_iter().enumerate().map(|(k, pv)| run_restart(k, pv, &active, warm, data, config)).collect();
    let evaluations = runs.iter().map(|r| r.evaluations).sum();
    let restarts: Vec<RestartSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let mut best: Option<usize> = None;
    for (k, r) in runs.iter().enumerate() {
        if let Some(o) = r.summary.objective {
            if best.is_none_or(|b| o > runs[b].summary.objective.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(k);
            }
        }
    }
    let Some(b) = best else {
        let message = runs.iter().filter_map(|r| r.summary.message.clone()).next().unwrap_or_default();
        return Err(Error::FitFailure { iterations: 0, message });
    };
    let winner = &runs[b];
    Ok(FitResult {
        model: theta.with_values(winner.values.clone()).model(),
        objective: winner.summary.objective.unwrap_or(f64::NAN),
        trace: winner.trace.clone(),
        iterations: winner.summary.iterations,
        best_restart: b,
        restarts,
        records: runs.into_iter().flat_map(|r| r.records).collect(),
        evaluations,
    })
}
