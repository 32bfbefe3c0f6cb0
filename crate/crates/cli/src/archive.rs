//! Versioned JSON archive of a fitted model.

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use fpgp::learn::StateSpaceModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT: &str = "fpgp-model";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the resolved configuration text.
    pub config_sha256: String,
    pub seed: u64,
    pub dataset: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format: String,
    pub version: u32,
    pub provenance: Provenance,
    pub objective: f64,
    pub iterations: usize,
    pub model: StateSpaceModel<f64>,
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl ModelArchive {
    pub fn new(model: StateSpaceModel<f64>, objective: f64, iterations: usize, provenance: Provenance) -> Self {
        ModelArchive { format: FORMAT.into(), version: VERSION, provenance, objective, iterations, model }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path.file_name().context("archive path has no file name")?.to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}
