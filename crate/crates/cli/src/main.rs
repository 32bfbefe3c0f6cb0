//! `fpgp`: simulate datasets, fit fixed-point GP models and run bifurcation sweeps.

mod archive;
mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fpgp::bifurcation::{
    dedupe, eigen_trace, extract_fixed_points, read_diagram_csv, summarize, sweep, write_diagram_csv,
    BifurcationDiagram, DiagramPoint, SystemSpec,
};
use fpgp::io::{read_dataset_csv, write_dataset_csv};
use fpgp::learn::FitRecord;
use serde::{Deserialize, Serialize};

use archive::{sha256_hex, write_atomic, ModelArchive, Provenance};
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "fpgp", version, about = "Fixed-point GP transition models and empirical bifurcation sweeps")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the configured system at its control value.
    Simulate,
    /// Fit a model to a dataset.
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Simulate, fit and extract fixed points over the control grid.
    Sweep,
    /// Tidy tables and an eigenvalue trace from a diagram.
    Report {
        #[arg(long)]
        diagram: Option<PathBuf>,
    },
}

/// Sidecar written next to a simulated dataset.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    seed: u64,
    control_value: f64,
    system: SystemSpec,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use fpgp::Error::*;
    match e.chain().find_map(|c| c.downcast_ref::<fpgp::Error>()) {
        Some(
            NumericDomain(_)
            | Conditioning { .. }
            | Evaluation { .. }
            | FitFailure { .. }
            | Initialization(_)
            | RootFinding { .. }
            | Eigen { .. },
        ) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .resolve(cli.seed)?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let resolved = config.to_toml()?;
    std::fs::write(cli.out.join("resolved_config.toml"), &resolved)?;

    match cli.command {
        Command::Simulate => simulate(&config, &cli.out),
        Command::Fit { data } => fit(&config, &resolved, data, &cli.out),
        Command::Sweep => run_sweep(&config, &cli.out),
        Command::Report { diagram } => report(&config, diagram, &cli.out),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn simulate(config: &RunConfig, out: &Path) -> anyhow::Result<ExitCode> {
    let control_value = config.io.control.unwrap_or_else(|| config.control_value());
    let data = config.system.simulate(control_value, config.seed)?;
    let path = out.join("dataset.csv");
    write_dataset_csv(&data, create(&path)?)?;
    let meta = DatasetMeta { seed: config.seed, control_value, system: config.system.clone() };
    std::fs::write(path.with_extension("toml"), toml::to_string(&meta)?)?;
    log::info!("wrote {} trials to {}", data.n_trials(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn fit(config: &RunConfig, resolved: &str, data: Option<PathBuf>, out: &Path) -> anyhow::Result<ExitCode> {
    let path = data.or_else(|| config.io.dataset.clone()).unwrap_or_else(|| out.join("dataset.csv"));
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let dataset = read_dataset_csv(std::io::BufReader::new(file)).with_context(|| format!("in {}", path.display()))?;
    let sidecar = path.with_extension("toml");
    let control = match config.io.control {
        Some(c) => c,
        None if sidecar.exists() => {
            let text = std::fs::read_to_string(&sidecar)?;
            let meta: DatasetMeta = toml::from_str(&text).with_context(|| format!("in {}", sidecar.display()))?;
            meta.control_value
        }
        None => 0.0,
    };

    let result = fpgp::fit(&dataset, &config.fit, None)?;
    let provenance = Provenance {
        config_sha256: sha256_hex(resolved),
        seed: config.seed,
        dataset: Some(path.display().to_string()),
    };
    ModelArchive::new(result.model.clone(), result.objective, result.iterations, provenance)
        .save(&out.join("model.json"))?;
    write_fit_log(&result.records, &out.join("fit_log.csv"))?;

    let point = analyze_extracted(control, &dataset, config, &result)?;
    let diagram = BifurcationDiagram { points: vec![point] };
    write_diagram_csv(&diagram, create(&out.join("fixed_points.csv"))?)?;
    log::info!("objective {:.6} after {} iterations", result.objective, result.iterations);
    Ok(ExitCode::SUCCESS)
}

/// Diagram point for an already fitted model.
fn analyze_extracted(
    control: f64,
    data: &fpgp::TrajectoryDataset,
    config: &RunConfig,
    result: &fpgp::FitResult,
) -> anyhow::Result<DiagramPoint> {
    let sweep = config.sweep_config();
    let data_scale = data.pooled_std();
    let est = extract_fixed_points(&result.model.transition, data_scale, sweep.belief_threshold)?;
    Ok(DiagramPoint {
        control,
        estimates: dedupe(&est, sweep.dedupe_radius),
        data_scale,
        objective: Some(result.objective),
        iterations: result.iterations,
        restarts: config.fit.restarts,
        error: None,
        model: None,
    })
}

fn write_fit_log(records: &[FitRecord], path: &Path) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["restart", "stage", "iteration", "objective", "grad_norm", "step"])?;
    for r in records {
        w.write_record([
            r.restart.to_string(),
            r.stage.as_str().to_string(),
            r.iteration.to_string(),
            r.objective.to_string(),
            r.grad_norm.to_string(),
            r.step.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn run_sweep(config: &RunConfig, out: &Path) -> anyhow::Result<ExitCode> {
    let diagram = sweep(&config.system, &config.fit, &config.sweep_config())?;
    write_diagram_csv(&diagram, create(&out.join("diagram.csv"))?)?;
    let summary = summarize(&diagram);
    write_atomic(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    let failed = diagram.points.iter().filter(|p| p.error.is_some()).count();
    if failed == diagram.points.len() {
        eprintln!("error: every grid point failed");
        return Ok(ExitCode::from(2));
    }
    if failed > 0 {
        log::warn!("{failed} of {} grid points failed", diagram.points.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn report(config: &RunConfig, diagram: Option<PathBuf>, out: &Path) -> anyhow::Result<ExitCode> {
    let path = diagram.or_else(|| config.io.diagram.clone()).unwrap_or_else(|| out.join("diagram.csv"));
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let diagram = read_diagram_csv(std::io::BufReader::new(file)).with_context(|| format!("in {}", path.display()))?;
    if diagram.points.is_empty() {
        bail!("empty diagram: {}", path.display());
    }
    let d = diagram.points.iter().flat_map(|p| p.estimates.first()).map(|e| e.location.len()).next().unwrap_or(1);

    let mut w = csv_writer(&out.join("report_points.csv"))?;
    let mut header = vec!["control_value".to_string(), "slot_id".into()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    header.extend(["class".into(), "belief".into(), "active".into()]);
    w.write_record(&header)?;
    for p in &diagram.points {
        for e in &p.estimates {
            let mut row = vec![p.control.to_string(), e.slot.to_string()];
            row.extend(e.location.iter().map(f64::to_string));
            row.extend([e.class.as_str().to_string(), e.belief.to_string(), e.active.to_string()]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    // Central estimate: the active estimate nearest the centroid of the active ones.
    let centroids: Vec<(f64, Vec<f64>)> = diagram
        .points
        .iter()
        .map(|p| {
            let active: Vec<_> = p.estimates.iter().filter(|e| e.active).collect();
            let mut c = vec![0.0; d];
            for e in &active {
                for (ci, xi) in c.iter_mut().zip(&e.location) {
                    *ci += xi / active.len() as f64;
                }
            }
            (p.control, c)
        })
        .collect();
    let reference = |control: f64| {
        centroids.iter().find(|(c, _)| *c == control).map(|(_, x)| x.clone()).unwrap_or_else(|| vec![0.0; d])
    };
    let trace = eigen_trace(&diagram, reference, f64::INFINITY)?;
    let mut w = csv_writer(&out.join("report_trace.csv"))?;
    let mut header = vec!["control_value".to_string(), "slot_id".into()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    for i in 1..=d {
        header.push(format!("eig_real_{i}"));
        header.push(format!("eig_imag_{i}"));
    }
    header.push("max_modulus".into());
    w.write_record(&header)?;
    for t in &trace {
        let mut row = vec![t.control.to_string(), t.slot.map(|s| s.to_string()).unwrap_or_default()];
        if t.slot.is_some() {
            row.extend(t.location.iter().map(f64::to_string));
            for l in &t.eigenvalues {
                row.push(l.re.to_string());
                row.push(l.im.to_string());
            }
        } else {
            row.extend(std::iter::repeat_n(String::new(), 3 * d));
        }
        row.push(t.max_modulus().map(|m| m.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    log::info!("reported {} control values", diagram.points.len());
    Ok(ExitCode::SUCCESS)
}
