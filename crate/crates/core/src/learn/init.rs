//! Data-driven starting points for the optimizer.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{FitConfig, KernelChoice, StateSpaceModel};
use crate::adf::{LatentInit, ObservationModel, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::fpsgp::{FixedPointSet, TransitionModel};
use crate::kernels::KernelHyperparams;
use crate::linalg::{Lu, Mat};
use crate::rng::substream;
use crate::sgp::{InducingSet, SparsePosterior};

/// Linear-interpolated empirical quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `k` points at the levels `i/(k+1)` of the 1-D state distribution.
fn quantile_grid(states: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let mut xs: Vec<f64> = states.iter().map(|s| s[0]).collect();
    xs.sort_by(f64::total_cmp);
    (1..=k).map(|i| vec![quantile(&xs, i as f64 / (k + 1) as f64)]).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// k-means++ seeding followed by Lloyd iterations.
pub(crate) fn kmeans(states: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![states.choose(rng).expect("non-empty states").clone()];
    while centers.len() < k {
        let w: Vec<f64> = states.iter().map(|s| sq_dist(&centers[nearest(&centers, s)], s)).collect();
        let total: f64 = w.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = states.len() - 1;
            for (i, wi) in w.iter().enumerate() {
                if r < *wi {
                    pick = i;
                    break;
                }
                r -= wi;
            }
            pick
        } else {
            rng.random_range(0..states.len())
        };
        centers.push(states[next].clone());
    }
    let d = states[0].len();
    for _ in 0..100 {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for s in states {
            let c = nearest(&centers, s);
            counts[c] += 1;
            sums[c].iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|v| v / counts[c] as f64).collect();
            if sq_dist(&new, &centers[c]) > 1e-24 {
                moved = true;
            }
            centers[c] = new;
        }
        if !moved {
            break;
        }
    }
    centers.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    centers
}

fn grid(states: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if k == 0 {
        Vec::new()
    } else if states[0].len() == 1 {
        quantile_grid(states, k)
    } else {
        kmeans(states, k, rng)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rows_to_mat(rows: &[Vec<f64>], d: usize) -> Mat<f64> {
    Mat::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Initial model from the data: inducing points on a quantile grid (k-means
/// for more than one latent dimension) carrying the mean successor of their
/// cell, fixed points on the same kind of grid with `J = 0.5 I`, location
/// noises at the data scale, lengthscales at the median pairwise distance.
///
/// Latent states are read off the first `D_x` observed channels, matching the
/// identity loading used for the observation model.
pub fn auto_init(data: &TrajectoryDataset, config: &FitConfig) -> Result<StateSpaceModel<f64>> {
    data.validate()?;
    config.validate()?;
    let dy = data.dim_y();
    let d = config.latent_dim.unwrap_or(dy);
    if d > dy {
        return Err(Error::Initialization(format!("latent dimension {d} exceeds {dy} observed channels")));
    }
    let states: Vec<Vec<f64>> = data.rows().map(|r| r[..d].to_vec()).collect();
    let n = states.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| states.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> =
        (0..d).map(|j| (states.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt()).collect();
    if std.iter().any(|s| !(*s > 1e-12)) {
        return Err(Error::Initialization("observed states have zero variance".into()));
    }
    let scale = std.iter().sum::<f64>() / d as f64;
    let mut rng = substream(config.seed, "init");

    let z = grid(&states, config.inducing_points, &mut rng);
    let mut succ = vec![vec![0.0; d]; z.len()];
    let mut counts = vec![0usize; z.len()];
    for (x, y) in data.transitions() {
        let c = nearest(&z, &x[..d]);
        counts[c] += 1;
        succ[c].iter_mut().zip(&y[..d]).for_each(|(a, b)| *a += b);
    }
    let u: Vec<Vec<f64>> = (0..z.len())
        .map(|c| if counts[c] == 0 { z[c].clone() } else { succ[c].iter().map(|v| v / counts[c] as f64).collect() })
        .collect();

    let mut resid = 0.0;
    for (x, y) in data.transitions() {
        let c = nearest(&z, &x[..d]);
        resid += sq_dist(&y[..d], &u[c]);
    }
    let process_std = (resid / (data.transitions().count() * d) as f64).sqrt().max(1e-3 * scale);

    let s = grid(&states, config.fixed_points, &mut rng);

    let stride = (states.len() / 400).max(1);
    let sub: Vec<&Vec<f64>> = states.iter().step_by(stride).collect();
    let mut dists = Vec::new();
    for i in 0..sub.len() {
        for j in i + 1..sub.len() {
            dists.push(sq_dist(sub[i], sub[j]).sqrt());
        }
    }
    let mut ell = median(dists);
    if !(ell > 1e-12) {
        ell = scale;
    }
    let second_moment = states.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / (n * d as f64);

    let kernel = match config.kernel {
        KernelChoice::ExponentiatedQuadratic => KernelHyperparams::exponentiated_quadratic(second_moment, &vec![ell; d]),
        KernelChoice::Linear => KernelHyperparams::linear(&vec![1.0; d]),
    };
    let p = s.len();
    let transition = TransitionModel::new(
        kernel,
        InducingSet::new(rows_to_mat(&z, d), rows_to_mat(&u, d), vec![config.inducing_noise_fraction * scale; z.len()])?,
        FixedPointSet::new(rows_to_mat(&s, d), vec![config.fixed_point_noise_fraction * scale; p], vec![Mat::identity(d).scale(0.5); p])?,
    )?
    .with_jacobian_noise(config.jacobian_noise)
    .with_process_noise(vec![process_std; d]);

    let firsts: Vec<&[f64]> = data.trials.iter().map(|t| &t.observations.row(0)[..d]).collect();
    let m0: Vec<f64> = (0..d).map(|j| firsts.iter().map(|f| f[j]).sum::<f64>() / firsts.len() as f64).collect();
    let v0: Vec<f64> = (0..d)
        .map(|j| {
            let v = firsts.iter().map(|f| (f[j] - m0[j]).powi(2)).sum::<f64>() / firsts.len() as f64;
            v.max((0.01 * scale).powi(2))
        })
        .collect();
    let model = StateSpaceModel {
        transition,
        observation: ObservationModel::identity(dy, d, config.obs_noise_fraction * scale),
        init: LatentInit::new(m0, v0)?,
    };
    model.validate()?;
    Ok(model)
}

/// Location noise of a switched-off fixed-point slot, in data-scale units.
pub(crate) const OFF_SLOT_FRACTION: f64 = 1e3;

/// Copy of `model` with every fixed-point slot pushed to `OFF_SLOT_FRACTION · scale`.
pub(crate) fn switch_off_slots(model: &StateSpaceModel<f64>, scale: f64) -> StateSpaceModel<f64> {
    let mut m = model.clone();
    m.transition.fixed_points.noise_std.iter_mut().for_each(|s| *s = OFF_SLOT_FRACTION * scale);
    m
}

fn newton_root(post: &SparsePosterior<f64>, mut x: Vec<f64>, max_step: f64, tol: f64) -> Option<Vec<f64>> {
    let d = x.len();
    for _ in 0..60 {
        let (m, _) = post.predict(&x).ok()?;
        let r: Vec<f64> = m.iter().zip(&x).map(|(a, b)| a - b).collect();
        if r.iter().all(|v| v.abs() < tol) {
            return Some(x);
        }
        let mut j = post.mean_jacobian(&x).ok()?;
        for i in 0..d {
            j[(i, i)] -= 1.0;
        }
        let mut dx = Lu::new(&j)?.solve(&r);
        let len = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !len.is_finite() {
            return None;
        }
        if len > max_step {
            dx.iter_mut().for_each(|v| *v *= max_step / len);
        }
        x.iter_mut().zip(&dx).for_each(|(a, b)| *a -= b);
    }
    None
}

/// Fixed points of the posterior mean map inside the bounding box of `states`
/// (padded by a tenth of its extent), found by damped Newton from a regular
/// grid of starts and ordered by how many states lie within half a data scale.
pub(crate) fn mean_map_roots(post: &SparsePosterior<f64>, states: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    let d = post.dim();
    let lo: Vec<f64> = (0..d).map(|j| states.iter().map(|s| s[j]).fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..d).map(|j| states.iter().map(|s| s[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let pad: Vec<f64> = (0..d).map(|j| 0.1 * (hi[j] - lo[j])).collect();
    let per_dim = ((400f64).powf(1.0 / d as f64).floor() as usize).max(2);
    let total = per_dim.pow(d as u32);
    let mut roots: Vec<Vec<f64>> = Vec::new();
    for k in 0..total {
        let mut idx = k;
        let start: Vec<f64> = (0..d)
            .map(|j| {
                let i = idx % per_dim;
                idx /= per_dim;
                lo[j] + (hi[j] - lo[j]) * (i as f64 + 0.5) / per_dim as f64
            })
            .collect();
        let Some(x) = newton_root(post, start, 0.5 * scale, 1e-10 * scale.max(1.0)) else { continue };
        let inside = (0..d).all(|j| x[j] >= lo[j] - pad[j] && x[j] <= hi[j] + pad[j]);
        if inside && roots.iter().all(|r| sq_dist(r, &x).sqrt() > 1e-3 * scale) {
            roots.push(x);
        }
    }
    let support = |x: &[f64]| states.iter().filter(|s| sq_dist(s, x).sqrt() < 0.5 * scale).count();
    let mut ranked: Vec<(usize, Vec<f64>)> = roots.into_iter().map(|r| (support(&r), r)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.iter().zip(&b.1).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)));
    ranked.into_iter().map(|(_, r)| r).collect()
}

/// Moves the first slots onto the fixed points of the current mean map, with
/// the map's Jacobian there and location noise `placed_slot_noise_fraction · scale`.
/// Slots beyond the number of roots stay switched off.
pub(crate) fn place_slots(
    model: &StateSpaceModel<f64>,
    data: &TrajectoryDataset,
    config: &FitConfig,
) -> Result<StateSpaceModel<f64>> {
    let scale = data.pooled_std().max(1e-12);
    let d = model.transition.dim();
    let post = model.transition.posterior()?;
    let states: Vec<Vec<f64>> = data.rows().map(|r| r[..d].to_vec()).collect();
    let roots = mean_map_roots(&post, &states, scale);
    let mut m = switch_off_slots(model, scale);
    let fp = &mut m.transition.fixed_points;
    for (p, root) in roots.iter().take(fp.len()).enumerate() {
        for j in 0..d {
            fp.locations[(p, j)] = root[j];
        }
        fp.jacobians[p] = post.mean_jacobian(root)?;
        fp.noise_std[p] = config.placed_slot_noise_fraction * scale;
    }
    log::debug!("placed {} of {} slots at mean-map roots", roots.len().min(fp.len()), fp.len());
    Ok(m)
}

/// Random perturbation of a starting model for restart `k ≥ 1`.
pub(crate) fn perturb(
    model: &StateSpaceModel<f64>,
    data: &TrajectoryDataset,
    rng: &mut ChaCha8Rng,
) -> StateSpaceModel<f64> {
    use rand_distr::{Distribution, Normal};
    let mut m = model.clone();
    let d = m.transition.dim();
    let scale = data.pooled_std().max(1e-12);
    let jitter = Normal::new(0.0, 0.1 * scale).expect("valid normal");
    let log_jitter = Normal::new(0.0, 0.2).expect("valid normal");
    let slope = Normal::new(0.0, 0.1).expect("valid normal");
    let states: Vec<&[f64]> = data.rows().collect();
    for v in m.transition.inducing.locations.as_mut_slice() {
        *v += jitter.sample(rng);
    }
    for v in m.transition.inducing.values.as_mut_slice() {
        *v += jitter.sample(rng);
    }
    for p in 0..m.transition.fixed_points.len() {
        let x = states[rng.random_range(0..states.len())];
        for j in 0..d {
            m.transition.fixed_points.locations[(p, j)] = x[j];
        }
        for v in m.transition.fixed_points.jacobians[p].as_mut_slice() {
            *v += slope.sample(rng);
        }
    }
    let mut scale_by = |v: &mut f64| *v *= f64::exp(log_jitter.sample(rng));
    match &mut m.transition.kernel {
        KernelHyperparams::ExponentiatedQuadratic { signal_variance, lengthscales } => {
            scale_by(signal_variance);
            lengthscales.iter_mut().for_each(&mut scale_by);
        }
        KernelHyperparams::Linear { weight_variances } => weight_variances.iter_mut().for_each(&mut scale_by),
    }
    m.transition.inducing.noise_std.iter_mut().for_each(&mut scale_by);
    m.transition.fixed_points.noise_std.iter_mut().for_each(&mut scale_by);
    m.transition.process_noise_std.iter_mut().for_each(&mut scale_by);
    m
}
