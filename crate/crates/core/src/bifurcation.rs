//! Fixed-point estimates from fitted models, stability classification and
//! control-parameter sweeps.

use std::cmp::Ordering;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adf::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::fpsgp::TransitionModel;
use crate::learn::{fit, FitConfig, StateSpaceModel};
use crate::linalg::Mat;
use crate::sim::{simulate_mutual_inhibition, simulate_pitchfork, MutualInhibitionParams, PitchforkParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityClass {
    Stable,
    Unstable,
    Saddle,
}

impl StabilityClass {
    pub fn as_str(self) -> &'static str {
        match self {
            StabilityClass::Stable => "stable",
            StabilityClass::Unstable => "unstable",
            StabilityClass::Saddle => "saddle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stable" => Some(StabilityClass::Stable),
            "unstable" => Some(StabilityClass::Unstable),
            "saddle" => Some(StabilityClass::Saddle),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl Eigenvalue {
    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

const MARGINAL_BAND: f64 = 1e-9;
const TIE_SHIFT: f64 = 1e-12;

/// Class from eigenvalue magnitudes, plus whether any `|λ|` lies within
/// `1e-9` of 1. Such magnitudes are compared as `|λ| + 1e-12`.
pub fn classify(eigenvalues: &[Eigenvalue]) -> (StabilityClass, bool) {
    let mut marginal = false;
    let mut inside = 0;
    for e in eigenvalues {
        let mut m = e.modulus();
        if (m - 1.0).abs() <= MARGINAL_BAND {
            marginal = true;
            m += TIE_SHIFT;
        }
        if m < 1.0 {
            inside += 1;
        }
    }
    let class = if inside == eigenvalues.len() {
        StabilityClass::Stable
    } else if inside == 0 {
        StabilityClass::Unstable
    } else {
        StabilityClass::Saddle
    };
    (class, marginal)
}

fn to_na(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn by_modulus(a: &Eigenvalue, b: &Eigenvalue) -> Ordering {
    b.modulus().total_cmp(&a.modulus()).then(b.re.total_cmp(&a.re)).then(b.im.total_cmp(&a.im))
}

/// Eigenvalues of a real square matrix, largest magnitude first.
pub fn eigenvalues(m: &Mat<f64>) -> Option<Vec<Eigenvalue>> {
    if !m.is_square() || !m.is_finite() {
        return None;
    }
    let schur = to_na(m).try_schur(1e-15, 10_000)?;
    let mut out: Vec<Eigenvalue> =
        schur.complex_eigenvalues().iter().map(|c| Eigenvalue { re: c.re, im: c.im }).collect();
    out.sort_by(by_modulus);
    Some(out)
}

/// Unit vector spanning the (numerical) null space of `m − λ I` for real `λ`.
pub fn eigenvector(m: &Mat<f64>, lambda: f64) -> Vec<f64> {
    let n = m.rows();
    let shifted = to_na(m) - DMatrix::identity(n, n) * lambda;
    let svd = shifted.svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let (k, _) = svd.singular_values.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &s)| if s < b.1 { (i, s) } else { b });
    let mut v: Vec<f64> = vt.row(k).iter().copied().collect();
    let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// One learned fixed-point slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointEstimate {
    pub slot: usize,
    pub location: Vec<f64>,
    pub jacobian: Mat<f64>,
    pub eigenvalues: Vec<Eigenvalue>,
    pub sigma_s: f64,
    /// `exp(−σ^s / data_scale)`.
    pub belief: f64,
    pub active: bool,
    pub class: StabilityClass,
    pub marginal: bool,
    /// Slots folded into this one by [`dedupe`].
    pub merged_from: Vec<usize>,
}

pub fn belief_strength(sigma_s: f64, data_scale: f64) -> f64 {
    (-sigma_s / data_scale).exp()
}

/// One estimate per slot; slots with belief below `threshold` are inactive.
pub fn extract_fixed_points(
    model: &TransitionModel<f64>,
    data_scale: f64,
    threshold: f64,
) -> Result<Vec<FixedPointEstimate>> {
    if !(data_scale > 0.0) {
        return Err(Error::InvalidParameter("data_scale must be positive".into()));
    }
    model.validate()?;
    let fp = &model.fixed_points;
    (0..fp.len())
        .map(|p| {
            let jacobian = fp.jacobians[p].clone();
            let eig = eigenvalues(&jacobian).ok_or(Error::Eigen { slot: p })?;
            let (class, marginal) = classify(&eig);
            let belief = belief_strength(fp.noise_std[p], data_scale);
            Ok(FixedPointEstimate {
                slot: p,
                location: fp.location(p).to_vec(),
                jacobian,
                eigenvalues: eig,
                sigma_s: fp.noise_std[p],
                belief,
                active: belief >= threshold,
                class,
                marginal,
                merged_from: Vec::new(),
            })
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Merges active estimates closer than `radius`, keeping the one with the
/// highest belief. Inactive estimates pass through untouched. Output is in
/// slot order.
pub fn dedupe(estimates: &[FixedPointEstimate], radius: f64) -> Vec<FixedPointEstimate> {
    let mut order: Vec<usize> = (0..estimates.len()).filter(|&i| estimates[i].active).collect();
    order.sort_by(|&a, &b| {
        estimates[b].belief.total_cmp(&estimates[a].belief).then(estimates[a].slot.cmp(&estimates[b].slot))
    });
    let mut survivors: Vec<FixedPointEstimate> = Vec::new();
    for i in order {
        let e = &estimates[i];
        match survivors.iter_mut().find(|s| distance(&s.location, &e.location) < radius) {
            Some(s) => {
                s.merged_from.push(e.slot);
                s.merged_from.extend(e.merged_from.iter().copied());
                s.merged_from.sort_unstable();
            }
            None => survivors.push(e.clone()),
        }
    }
    survivors.extend(estimates.iter().filter(|e| !e.active).cloned());
    survivors.sort_by_key(|e| e.slot);
    survivors
}

/// Simulated system whose control parameter is swept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    Pitchfork(PitchforkParams),
    MutualInhibition(MutualInhibitionParams),
}

impl SystemSpec {
    /// Dataset at control value `c` using master seed `seed`.
    pub fn simulate(&self, c: f64, seed: u64) -> Result<TrajectoryDataset> {
        match self {
            SystemSpec::Pitchfork(p) => simulate_pitchfork(&PitchforkParams { r: c, seed, ..p.clone() }),
            SystemSpec::MutualInhibition(p) => {
                simulate_mutual_inhibition(&MutualInhibitionParams { e_ext: c, seed, ..p.clone() })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
    pub belief_threshold: f64,
    pub dedupe_radius: f64,
    /// Start each grid point from the fit at the previous one (forces sequential evaluation).
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            grid: vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0],
            belief_threshold: 0.5,
            dedupe_radius: 0.05,
            warm_start: false,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidParameter("sweep grid is empty".into()));
        }
        if self.grid.iter().any(|g| !g.is_finite()) || self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("sweep grid must be finite and strictly increasing".into()));
        }
        if !(self.dedupe_radius > 0.0) || !(self.belief_threshold > 0.0 && self.belief_threshold <= 1.0) {
            return Err(Error::InvalidParameter("dedupe_radius must be positive and belief_threshold in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramPoint {
    pub control: f64,
    pub estimates: Vec<FixedPointEstimate>,
    pub data_scale: f64,
    pub objective: Option<f64>,
    pub iterations: usize,
    pub restarts: usize,
    pub error: Option<String>,
    #[serde(skip)]
    pub model: Option<StateSpaceModel<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BifurcationDiagram {
    pub points: Vec<DiagramPoint>,
}

/// Fits one dataset and extracts its deduplicated fixed points.
pub fn analyze_dataset(
    control: f64,
    data: &TrajectoryDataset,
    fit_config: &FitConfig,
    sweep: &SweepConfig,
    init: Option<&StateSpaceModel<f64>>,
) -> DiagramPoint {
    let data_scale = data.pooled_std();
    let mut point = DiagramPoint {
        control,
        estimates: Vec::new(),
        data_scale,
        objective: None,
        iterations: 0,
        restarts: fit_config.restarts,
        error: None,
        model: None,
    };
    let outcome = fit(data, fit_config, init).and_then(|r| {
        let est = extract_fixed_points(&r.model.transition, data_scale, sweep.belief_threshold)?;
        Ok((r, est))
    });
    match outcome {
        Ok((r, est)) => {
            point.estimates = dedupe(&est, sweep.dedupe_radius);
            point.objective = Some(r.objective);
            point.iterations = r.iterations;
            point.model = Some(r.model);
        }
        Err(e) => {
            log::warn!("control value {control}: {e}");
            point.error = Some(e.to_string());
        }
    }
    point
}

/// Simulates, fits and extracts at every grid value. All grid points share
/// the master seed, so their datasets use common random numbers. A grid point
/// whose simulation or fit fails is kept with its error message.
pub fn sweep(system: &SystemSpec, fit_config: &FitConfig, config: &SweepConfig) -> Result<BifurcationDiagram> {
    config.validate()?;
    fit_config.validate()?;
    let fit_config = FitConfig { seed: config.seed, ..fit_config.clone() };
    let datasets: Vec<Result<TrajectoryDataset>> = config.grid.iter().map(|&c| system.simulate(c, config.seed)).collect();
    let analyze = |c: f64, data: &Result<TrajectoryDataset>, init: Option<&StateSpaceModel<f64>>| match data {
        Ok(data) => analyze_dataset(c, data, &fit_config, config, init),
        Err(e) => {
            log::warn!("control value {c}: {e}");
            DiagramPoint {
                control: c,
                estimates: Vec::new(),
                data_scale: 0.0,
                objective: None,
                iterations: 0,
                restarts: fit_config.restarts,
                error: Some(e.to_string()),
                model: None,
            }
        }
    };
    let points = if config.warm_start {
        let mut out: Vec<DiagramPoint> = Vec::new();
        for (&c, data) in config.grid.iter().zip(&datasets) {
            let prev = out.iter().rev().find_map(|p| p.model.as_ref());
            out.push(analyze(c, data, prev));
        }
        out
    } else {
        config.grid.par_iter().zip(datasets.par_iter()).map(|(&c, data)| analyze(c, data, None)).collect()
    };
    Ok(BifurcationDiagram { points })
}

/// Tracked estimate at one control value; `slot` is `None` for a gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub control: f64,
    pub slot: Option<usize>,
    pub location: Vec<f64>,
    pub eigenvalues: Vec<Eigenvalue>,
    /// Unit eigenvector per eigenvalue; empty for complex eigenvalues.
    pub eigenvectors: Vec<Vec<f64>>,
}

impl TraceEntry {
    pub fn max_modulus(&self) -> Option<f64> {
        self.eigenvalues.first().map(Eigenvalue::modulus)
    }
}

/// Follows the active estimate nearest `reference(control)` (within `radius`) across the diagram.
pub fn eigen_trace(
    diagram: &BifurcationDiagram,
    reference: impl Fn(f64) -> Vec<f64>,
    radius: f64,
) -> Result<Vec<TraceEntry>> {
    if diagram.points.is_empty() {
        return Err(Error::InvalidParameter("empty diagram".into()));
    }
    Ok(diagram
        .points
        .iter()
        .map(|pt| {
            let r = reference(pt.control);
            let best = pt
                .estimates
                .iter()
                .filter(|e| e.active)
                .map(|e| (distance(&e.location, &r), e))
                .filter(|(d, _)| *d <= radius)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            match best {
                Some((_, e)) => TraceEntry {
                    control: pt.control,
                    slot: Some(e.slot),
                    location: e.location.clone(),
                    eigenvalues: e.eigenvalues.clone(),
                    eigenvectors: e
                        .eigenvalues
                        .iter()
                        .map(|l| if l.im == 0.0 { eigenvector(&e.jacobian, l.re) } else { Vec::new() })
                        .collect(),
                },
                None => TraceEntry {
                    control: pt.control,
                    slot: None,
                    location: Vec::new(),
                    eigenvalues: Vec::new(),
                    eigenvectors: Vec::new(),
                },
            }
        })
        .collect())
}

fn diagram_dim(diagram: &BifurcationDiagram) -> usize {
    diagram.points.iter().flat_map(|p| p.estimates.first()).map(|e| e.location.len()).next().unwrap_or(1)
}

/// Writes the diagram as CSV with one row per estimate.
pub fn write_diagram_csv<W: Write>(diagram: &BifurcationDiagram, out: W) -> Result<()> {
    let d = diagram_dim(diagram);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["control_value".to_string(), "slot_id".into(), "active".into()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    header.extend(["sigma_s".into(), "belief".into(), "class".into(), "marginal".into()]);
    for i in 1..=d {
        header.push(format!("eig_real_{i}"));
        header.push(format!("eig_imag_{i}"));
    }
    for i in 1..=d {
        for j in 1..=d {
            header.push(format!("jac_{i}_{j}"));
        }
    }
    header.push("merged_from".into());
    w.write_record(&header).map_err(csv_err)?;
    for p in &diagram.points {
        for e in &p.estimates {
            let mut row = vec![p.control.to_string(), e.slot.to_string(), e.active.to_string()];
            row.extend(e.location.iter().map(f64::to_string));
            row.extend([e.sigma_s.to_string(), e.belief.to_string(), e.class.as_str().into(), e.marginal.to_string()]);
            for l in &e.eigenvalues {
                row.push(l.re.to_string());
                row.push(l.im.to_string());
            }
            row.extend(e.jacobian.as_slice().iter().map(f64::to_string));
            row.push(e.merged_from.iter().map(usize::to_string).collect::<Vec<_>>().join(";"));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn parse_f64(s: &str, row: usize, col: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse { row, message: format!("column {col}: cannot parse {s:?}") })
}

/// Reads a diagram CSV back. Points with no estimates (failed fits) are not represented in the file.
pub fn read_diagram_csv<R: std::io::Read>(input: R) -> Result<BifurcationDiagram> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let d = header.iter().filter(|h| h.starts_with("x_")).count();
    let need = |name: &str| col(name).ok_or_else(|| Error::Format(format!("missing column {name}")));
    let (c_ctrl, c_slot, c_active) = (need("control_value")?, need("slot_id")?, need("active")?);
    let (c_sig, c_bel, c_cls) = (need("sigma_s")?, need("belief")?, need("class")?);
    let mut diagram = BifurcationDiagram::default();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let f = |name: &str| -> Result<f64> { parse_f64(get(need(name)?), row, name) };
        let control = parse_f64(get(c_ctrl), row, "control_value")?;
        let location = (1..=d).map(|k| f(&format!("x_{k}"))).collect::<Result<Vec<_>>>()?;
        let mut eig = Vec::new();
        for k in 1..=d {
            eig.push(Eigenvalue { re: f(&format!("eig_real_{k}"))?, im: f(&format!("eig_imag_{k}"))? });
        }
        let mut jac = Vec::new();
        for a in 1..=d {
            for b in 1..=d {
                jac.push(match col(&format!("jac_{a}_{b}")) {
                    Some(c) => parse_f64(get(c), row, "jac")?,
                    None => f64::NAN,
                });
            }
        }
        let merged = get(need("merged_from")?);
        let est = FixedPointEstimate {
            slot: get(c_slot).parse().map_err(|_| Error::Parse { row, message: "bad slot_id".into() })?,
            location,
            jacobian: Mat::from_row_slice(d, d, &jac),
            eigenvalues: eig,
            sigma_s: parse_f64(get(c_sig), row, "sigma_s")?,
            belief: parse_f64(get(c_bel), row, "belief")?,
            active: get(c_active) == "true",
            class: StabilityClass::parse(get(c_cls)).ok_or_else(|| Error::Parse { row, message: "bad class".into() })?,
            marginal: col("marginal").map(|c| get(c) == "true").unwrap_or(false),
            merged_from: if merged.is_empty() {
                Vec::new()
            } else {
                merged.split(';').map(|s| s.parse().map_err(|_| Error::Parse { row, message: "bad merged_from".into() })).collect::<Result<_>>()?
            },
        };
        match diagram.points.last_mut() {
            Some(p) if p.control == control => p.estimates.push(est),
            _ => diagram.points.push(DiagramPoint {
                control,
                estimates: vec![est],
                data_scale: f64::NAN,
                objective: None,
                iterations: 0,
                restarts: 0,
                error: None,
                model: None,
            }),
        }
    }
    Ok(diagram)
}

/// Per-control-value class counts over active estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub control: f64,
    pub stable: usize,
    pub unstable: usize,
    pub saddle: usize,
    pub inactive: usize,
    pub objective: Option<f64>,
    pub iterations: usize,
    pub restarts: usize,
    pub error: Option<String>,
}

pub fn summarize(diagram: &BifurcationDiagram) -> Vec<SummaryRow> {
    diagram
        .points
        .iter()
        .map(|p| {
            let count = |c: StabilityClass| p.estimates.iter().filter(|e| e.active && e.class == c).count();
            SummaryRow {
                control: p.control,
                stable: count(StabilityClass::Stable),
                unstable: count(StabilityClass::Unstable),
                saddle: count(StabilityClass::Saddle),
                inactive: p.estimates.iter().filter(|e| !e.active).count(),
                objective: p.objective,
                iterations: p.iterations,
                restarts: p.restarts,
                error: p.error.clone(),
            }
        })
        .collect()
}
