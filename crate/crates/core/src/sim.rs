//! Ground-truth simulators: the stochastic pitchfork map and a leaky
//! mutual-inhibition circuit, with their deterministic fixed points.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adf::{TrajectoryDataset, Trial};
use crate::bifurcation::{classify, eigenvalues, Eigenvalue, StabilityClass};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::substream;

/// `x(t+1) = r x(t) − x(t)³ + ε_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitchforkParams {
    pub r: f64,
    pub noise_std: f64,
    /// Observed rows per trial, `x(1)..x(T)`; the initial state `x(0)` is latent.
    pub steps: usize,
    pub n_trials: usize,
    pub init_mean: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for PitchforkParams {
    fn default() -> Self {
        PitchforkParams { r: 1.75, noise_std: 0.2, steps: 20, n_trials: 32, init_mean: 0.0, init_std: 0.001, seed: 0 }
    }
}

impl PitchforkParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.init_std >= 0.0) || !self.r.is_finite() || !self.init_mean.is_finite() {
            return Err(Error::InvalidParameter("pitchfork: r and init_mean must be finite, noise_std and init_std non-negative".into()));
        }
        if self.steps < 2 || self.n_trials == 0 {
            return Err(Error::InvalidParameter("pitchfork: need steps >= 2 and n_trials >= 1".into()));
        }
        Ok(())
    }
}

pub fn pitchfork_map(r: f64, x: f64) -> f64 {
    r * x - x * x * x
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("non-negative standard deviation")
}

/// Magnitude beyond which a simulated trajectory counts as escaped to infinity.
pub const DIVERGENCE_BOUND: f64 = 1e3;

/// Fails with [`Error::NumericDomain`] if any trajectory escapes past [`DIVERGENCE_BOUND`],
/// which happens for `r` near 2 when noise pushes the state out of the bounded region.
pub fn simulate_pitchfork(p: &PitchforkParams) -> Result<TrajectoryDataset> {
    p.validate()?;
    let trials: Vec<Trial> = (0..p.n_trials)
        .into_par_iter()
        .map(|n| {
            let mut rng = substream(p.seed, &format!("simulate-trial-{n}"));
            let mut x = p.init_mean + normal(p.init_std).sample(&mut rng);
            let eps = normal(p.noise_std);
            let mut obs = Mat::zeros(p.steps, 1);
            for t in 0..p.steps {
                x = pitchfork_map(p.r, x) + eps.sample(&mut rng);
                if !(x.abs() <= DIVERGENCE_BOUND) {
                    return Err(Error::NumericDomain(format!(
                        "pitchfork trial {n} diverged at step {} (r = {}, seed {})",
                        t + 1,
                        p.r,
                        p.seed
                    )));
                }
                obs[(t, 0)] = x;
            }
            Ok(Trial { observations: obs, control: Some(p.r) })
        })
        .collect::<Result<_>>()?;
    TrajectoryDataset::new(trials)
}

/// Deterministic fixed point with its Jacobian and stability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueFixedPoint {
    pub location: Vec<f64>,
    pub jacobian: Mat<f64>,
    pub class: StabilityClass,
}

fn scalar_point(x: f64, d: f64) -> TrueFixedPoint {
    TrueFixedPoint { location: vec![x], jacobian: Mat::from_row_slice(1, 1, &[d]), class: classify(&[Eigenvalue { re: d, im: 0.0 }]).0 }
}

/// `0` with slope `r`, plus `±√(r−1)` with slope `3 − 2r` once `r > 1`, sorted by location.
pub fn true_fixed_points_pitchfork(r: f64) -> Vec<TrueFixedPoint> {
    let mut out = vec![scalar_point(0.0, r)];
    if r > 1.0 {
        let x = (r - 1.0).sqrt();
        out.insert(0, scalar_point(-x, 3.0 - 2.0 * r));
        out.push(scalar_point(x, 3.0 - 2.0 * r));
    }
    out
}

/// Two symmetric populations with leak:
/// `Pos(t+1) = Pos(t) + κ (φ(E − ω Neg(t)) − Pos(t)) + ε`, `φ(I) = a tanh(g (I − θ)) + b`,
/// and the same for `Neg` with the roles swapped.
///
/// With the defaults the symmetric state loses stability at `E ≈ −0.148`:
/// below it there is a single stable point, above it a saddle on the
/// diagonal flanked by a mirror pair of stable points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MutualInhibitionParams {
    pub e_ext: f64,
    pub inhibition: f64,
    pub noise_std: f64,
    pub gain: f64,
    pub threshold: f64,
    pub amplitude: f64,
    pub baseline: f64,
    pub leak: f64,
    pub steps: usize,
    pub n_trials: usize,
    pub init_mean: [f64; 2],
    /// Half-width of the uniform box around `init_mean`.
    pub init_spread: f64,
    pub seed: u64,
}

impl Default for MutualInhibitionParams {
    fn default() -> Self {
        MutualInhibitionParams {
            e_ext: 1.0,
            inhibition: 1.0,
            noise_std: 0.1,
            gain: 2.0,
            threshold: 0.0,
            amplitude: 1.0,
            baseline: 1.0,
            leak: 0.25,
            steps: 80,
            n_trials: 60,
            init_mean: [1.0, 1.0],
            init_spread: 0.3,
            seed: 0,
        }
    }
}

impl MutualInhibitionParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("mutual inhibition: {m}")));
        let finite = [self.e_ext, self.threshold, self.baseline, self.init_mean[0], self.init_mean[1]];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("e_ext, threshold, baseline and init_mean must be finite");
        }
        if !(self.inhibition > 0.0) {
            return bad("inhibition must be positive");
        }
        if !(self.gain > 0.0 && self.amplitude > 0.0) {
            return bad("gain and amplitude must be positive");
        }
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return bad("leak must lie in (0, 1]");
        }
        if !(self.noise_std >= 0.0 && self.init_spread >= 0.0) {
            return bad("noise_std and init_spread must be non-negative");
        }
        if self.steps < 2 || self.n_trials == 0 {
            return bad("need steps >= 2 and n_trials >= 1");
        }
        Ok(())
    }

    /// Response function `φ`.
    pub fn response(&self, input: f64) -> f64 {
        self.amplitude * (self.gain * (input - self.threshold)).tanh() + self.baseline
    }

    pub fn response_slope(&self, input: f64) -> f64 {
        let t = (self.gain * (input - self.threshold)).tanh();
        self.amplitude * self.gain * (1.0 - t * t)
    }

    /// Deterministic part of the update.
    pub fn step(&self, x: [f64; 2]) -> [f64; 2] {
        let [pos, neg] = x;
        [
            pos + self.leak * (self.response(self.e_ext - self.inhibition * neg) - pos),
            neg + self.leak * (self.response(self.e_ext - self.inhibition * pos) - neg),
        ]
    }

    pub fn jacobian(&self, x: [f64; 2]) -> Mat<f64> {
        let [pos, neg] = x;
        let k = self.leak;
        let w = self.inhibition;
        Mat::from_row_slice(2, 2, &[
            1.0 - k,
            -k * w * self.response_slope(self.e_ext - w * neg),
            -k * w * self.response_slope(self.e_ext - w * pos),
            1.0 - k,
        ])
    }
}

pub fn simulate_mutual_inhibition(p: &MutualInhibitionParams) -> Result<TrajectoryDataset> {
    p.validate()?;
    let trials: Vec<Trial> = (0..p.n_trials)
        .into_par_iter()
        .map(|n| {
            use rand::Rng;
            let mut rng = substream(p.seed, &format!("simulate-trial-{n}"));
            let mut x = [0.0; 2];
            for (xi, m) in x.iter_mut().zip(p.init_mean) {
                *xi = if p.init_spread > 0.0 { m + rng.random_range(-p.init_spread..p.init_spread) } else { m };
            }
            let eps = normal(p.noise_std);
            let mut obs = Mat::zeros(p.steps, 2);
            for t in 0..p.steps {
                let next = p.step(x);
                x = [next[0] + eps.sample(&mut rng), next[1] + eps.sample(&mut rng)];
                obs[(t, 0)] = x[0];
                obs[(t, 1)] = x[1];
            }
            Trial { observations: obs, control: Some(p.e_ext) }
        })
        .collect();
    TrajectoryDataset::new(trials)
}

/// Sampled zero-increment curves, as `[pos, neg]` points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nullclines {
    /// `Pos = φ(E − ω Neg)`.
    pub pos: Vec<[f64; 2]>,
    /// `Neg = φ(E − ω Pos)`.
    pub neg: Vec<[f64; 2]>,
}

pub fn nullclines(p: &MutualInhibitionParams, samples: usize) -> Nullclines {
    let (lo, hi) = activity_range(p);
    let grid: Vec<f64> =
        (0..samples).map(|i| lo + (hi - lo) * i as f64 / (samples.max(2) - 1) as f64).collect();
    Nullclines {
        pos: grid.iter().map(|&neg| [p.response(p.e_ext - p.inhibition * neg), neg]).collect(),
        neg: grid.iter().map(|&pos| [pos, p.response(p.e_ext - p.inhibition * pos)]).collect(),
    }
}

fn activity_range(p: &MutualInhibitionParams) -> (f64, f64) {
    (p.baseline - p.amplitude - 0.5, p.baseline + p.amplitude + 0.5)
}

fn residual(p: &MutualInhibitionParams, x: [f64; 2]) -> [f64; 2] {
    let s = p.step(x);
    [s[0] - x[0], s[1] - x[1]]
}

/// Newton iterations on `step(x) − x`.
fn newton(p: &MutualInhibitionParams, mut x: [f64; 2]) -> Option<[f64; 2]> {
    for _ in 0..100 {
        let r = residual(p, x);
        if r[0].abs().max(r[1].abs()) < 1e-14 {
            return Some(x);
        }
        let j = p.jacobian(x);
        let (a, b, c, d) = (j[(0, 0)] - 1.0, j[(0, 1)], j[(1, 0)], j[(1, 1)] - 1.0);
        let det = a * d - b * c;
        if det.abs() < 1e-300 {
            return None;
        }
        let dx = [(d * r[0] - b * r[1]) / det, (a * r[1] - c * r[0]) / det];
        x = [x[0] - dx[0], x[1] - dx[1]];
        if !x[0].is_finite() || !x[1].is_finite() {
            return None;
        }
    }
    let r = residual(p, x);
    (r[0].abs().max(r[1].abs()) < 1e-10).then_some(x)
}

/// Every deterministic fixed point, sorted by `Pos`.
///
/// Fixed points satisfy `Pos = φ(E − ω φ(E − ω Pos))` with `Neg = φ(E − ω Pos)`;
/// sign changes of that scalar equation on a fine grid are bisected and the
/// resulting starts polished by Newton on the full update.
pub fn true_fixed_points_mutual(p: &MutualInhibitionParams) -> Result<Vec<TrueFixedPoint>> {
    p.validate()?;
    let (lo, hi) = activity_range(p);
    let h = |x: f64| p.response(p.e_ext - p.inhibition * p.response(p.e_ext - p.inhibition * x)) - x;
    let n = 4000;
    let xs: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    let mut starts = Vec::new();
    for w in xs.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        let (mut fa, fb) = (h(a), h(b));
        if fa == 0.0 {
            starts.push(a);
            continue;
        }
        if fa * fb > 0.0 {
            continue;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            let fm = h(m);
            if fa * fm <= 0.0 {
                b = m;
            } else {
                a = m;
                fa = fm;
            }
            if b - a < 1e-15 {
                break;
            }
        }
        starts.push(0.5 * (a + b));
    }
    let mut roots: Vec<[f64; 2]> = Vec::new();
    let mut failed = Vec::new();
    for s in starts {
        let x0 = [s, p.response(p.e_ext - p.inhibition * s)];
        match newton(p, x0) {
            Some(x) => {
                if !roots.iter().any(|r| (r[0] - x[0]).abs().max((r[1] - x[1]).abs()) < 1e-6) {
                    roots.push(x);
                }
            }
            None => failed.push(x0.to_vec()),
        }
    }
    if roots.is_empty() || !failed.is_empty() {
        return Err(Error::RootFinding { starts: failed });
    }
    roots.sort_by(|a, b| a[0].total_cmp(&b[0]));
    roots
        .into_iter()
        .map(|x| {
            let jacobian = p.jacobian(x);
            let eig = eigenvalues(&jacobian).ok_or(Error::Eigen { slot: 0 })?;
            Ok(TrueFixedPoint { location: x.to_vec(), jacobian, class: classify(&eig).0 })
        })
        .collect()
}
