//! `shiftguard`: generate data, train and calibrate models, and run
//! selective-prediction experiments from JSON specs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use shiftguard::data::{generate_synthetic, load_features, write_features_csv, FeatureFormat, LabeledDataset};
use shiftguard::harness::{
    comparison_csv, emit_report, run_experiment, run_matrix, ExperimentReport, ExperimentSpec, ReportFormat,
};
use shiftguard::models::ModelDocument;
use shiftguard::workflow::{calibrate_model, train_model, CalibrationMethod, ModelKind, TrainConfig};

#[derive(Parser)]
#[command(
    name = "shiftguard",
    version,
    about = "Uncertainty-aware selective prediction under dataset shift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-class Gaussian dataset as CSV.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        sep: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on every row of a feature file.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a calibrator for a trained model.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment spec end to end.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every `*.json` spec in a directory.
    Matrix {
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a report's threshold sweep as CSV.
    Sweep {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Mlp,
    Ensemble,
    Priornet,
    Stumps,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Mlp => ModelKind::Mlp,
            ModelArg::Ensemble => ModelKind::Ensemble,
            ModelArg::Priornet => ModelKind::Priornet,
            ModelArg::Stumps => ModelKind::Stumps,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Isotonic,
    Temperature,
}

impl From<MethodArg> for CalibrationMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Isotonic => CalibrationMethod::Isotonic,
            MethodArg::Temperature => CalibrationMethod::Temperature,
        }
    }
}

/// An error tagged with the command stage that produced it.
struct StageError {
    stage: &'static str,
    source: anyhow::Error,
}

trait Staged<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: Into<anyhow::Error>> Staged<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            source: e.into(),
        })
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Feature files are CSV unless the extension says JSONL.
fn load_data(path: &Path) -> Result<LabeledDataset> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => FeatureFormat::Jsonl,
        _ => FeatureFormat::Csv,
    };
    load_features(path, format).with_context(|| format!("cannot load features from {}", path.display()))
}

fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    let spec = ExperimentSpec::from_json(&read_text(path)?).with_context(|| format!("bad spec {}", path.display()))?;
    spec.validate()
        .with_context(|| format!("invalid spec {}", path.display()))?;
    Ok(spec)
}

fn execute(cmd: Command) -> Result<(), StageError> {
    match cmd {
        Command::Gen { n, d, sep, seed, out } => {
            let data = generate_synthetic(n, d, sep, seed).stage("gen")?;
            write_features_csv(&data, &out).stage("write")?;
            log::info!("wrote {n} rows to {}", out.display());
        }
        Command::Train {
            model,
            data,
            config,
            out,
        } => {
            let cfg = match config {
                Some(p) => read_text(&p)
                    .and_then(|t| TrainConfig::from_json(&t).with_context(|| format!("bad config {}", p.display())))
                    .stage("config")?,
                None => TrainConfig::default(),
            };
            let data = load_data(&data).stage("load")?;
            let kind = ModelKind::from(model);
            let doc = train_model(kind, &data, &cfg).stage("train")?;
            write_text(&out, &doc.to_json().stage("write")?).stage("write")?;
            log::info!("trained {} on {} rows", kind.name(), data.len());
        }
        Command::Calibrate {
            model,
            method,
            data,
            out,
        } => {
            let doc = read_text(&model)
                .and_then(|t| ModelDocument::from_json(&t).with_context(|| format!("bad model {}", model.display())))
                .stage("load")?;
            let data = load_data(&data).stage("load")?;
            let artifact = calibrate_model(&doc, &data, method.into(), "calibration").stage("calibrate")?;
            write_json(&out, &artifact).stage("write")?;
        }
        Command::Run { spec, out } => {
            let spec = load_spec(&spec).stage("spec")?;
            let report = run_experiment(&spec).stage("run")?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            emit_report(&report, &out, ReportFormat::Json).stage("write")?;
        }
        Command::Matrix { specs, out } => run_matrix_dir(&specs, &out)?,
        Command::Sweep { report, csv } => {
            let report = read_text(&report)
                .and_then(|t| {
                    ExperimentReport::from_json(&t).with_context(|| format!("bad report {}", report.display()))
                })
                .stage("load")?;
            emit_report(&report, &csv, ReportFormat::Csv).stage("write")?;
        }
    }
    Ok(())
}

fn run_matrix_dir(dir: &Path, out: &Path) -> Result<(), StageError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))
        .stage("spec")?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(anyhow::anyhow!("no *.json specs in {}", dir.display())).stage("spec");
    }
    let specs = paths
        .iter()
        .map(|p| load_spec(p))
        .collect::<Result<Vec<_>>>()
        .stage("spec")?;
    let outcome = run_matrix(&specs).stage("matrix")?;

    fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .stage("write")?;
    let mut failed = 0;
    for (path, result) in paths.iter().zip(&outcome.results) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("spec");
        match result {
            Ok(report) => emit_report(report, out.join(format!("{stem}.json")), ReportFormat::Json).stage("write")?,
            Err(e) => {
                failed += 1;
                log::error!("{stem}: {e}");
            }
        }
    }
    write_text(
        &out.join("comparison.csv"),
        &comparison_csv(&outcome.table).stage("write")?,
    )
    .stage("write")?;
    if failed > 0 {
        return Err(anyhow::anyhow!("{failed} of {} specs failed", paths.len())).stage("matrix");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {:#}", e.stage, e.source);
            ExitCode::FAILURE
        }
    }
}
