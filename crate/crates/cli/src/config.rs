//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use anyhow::Context;
use fpgp::bifurcation::{SweepConfig, SystemSpec};
use fpgp::learn::FitConfig;
use fpgp::sim::PitchforkParams;
use serde::{Deserialize, Serialize};

/// Sweep options; the seed comes from [`RunConfig::seed`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub grid: Vec<f64>,
    pub belief_threshold: f64,
    pub dedupe_radius: f64,
    pub warm_start: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        let d = SweepConfig::default();
        SweepSection {
            grid: d.grid,
            belief_threshold: d.belief_threshold,
            dedupe_radius: d.dedupe_radius,
            warm_start: d.warm_start,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Dataset read by `fit`.
    pub dataset: Option<PathBuf>,
    /// Diagram read by `report`.
    pub diagram: Option<PathBuf>,
    /// Control value recorded with a fitted dataset; falls back to the
    /// dataset's sidecar, then to the system section.
    pub control: Option<f64>,
}

/// Whole-run configuration. The top-level `seed` is the master seed and
/// replaces the `seed` keys of the sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub system: SystemSpec,
    pub fit: FitConfig,
    pub sweep: SweepSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            system: SystemSpec::Pitchfork(PitchforkParams::default()),
            fit: FitConfig::default(),
            sweep: SweepSection::default(),
            io: IoSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Applies the master seed everywhere and validates every section.
    pub fn resolve(mut self, seed: Option<u64>) -> anyhow::Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.fit.seed = self.seed;
        match &mut self.system {
            SystemSpec::Pitchfork(p) => {
                p.seed = self.seed;
                p.validate()?;
            }
            SystemSpec::MutualInhibition(p) => {
                p.seed = self.seed;
                p.validate()?;
            }
        }
        self.fit.validate()?;
        self.sweep_config().validate()?;
        Ok(self)
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            grid: self.sweep.grid.clone(),
            belief_threshold: self.sweep.belief_threshold,
            dedupe_radius: self.sweep.dedupe_radius,
            warm_start: self.sweep.warm_start,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// The system's own control value (`r` or `e_ext`).
    pub fn control_value(&self) -> f64 {
        match &self.system {
            SystemSpec::Pitchfork(p) => p.r,
            SystemSpec::MutualInhibition(p) => p.e_ext,
        }
    }
}
