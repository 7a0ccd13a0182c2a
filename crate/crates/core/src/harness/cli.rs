//! `megp` command line.
//!
//! Exit status: 0 on success, 1 for usage errors, 2 for runtime or numerical
//! failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::config::{DataSource, EvalTarget, ExperimentConfig};
use super::experiment::{
    load_data, predict_tests, run_experiment, run_one, score, sha256_hex, trace_rows,
    write_artifact, write_manifest, FitTiming, Manifest,
};
use crate::baselines::SavedModel;
use crate::datagen::{read_dataset, write_dataset, GlucoseSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::grouped::Method;

#[derive(Parser, Debug)]
#[command(
    name = "megp",
    version,
    about = "Sparse grouped mixed-effect Gaussian processes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment seed (overrides the configuration).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a GP mixed-effect dataset.
    GenSynthetic(Common),
    /// Simulate an IVGTT glucose cohort.
    GenGlucose(Common),
    /// Fit one method and save the model.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<String>,
        /// Number of inducing points (a single value).
        #[arg(long, value_delimiter = ',')]
        m: Option<Vec<usize>>,
    },
    /// Predictive moments at every test point of a dataset.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// SMSE and MSLL of a saved model on a dataset's test points.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "truth")]
        against: Against,
    },
    /// Repetitions of every method at every inducing count.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',')]
        method: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        m: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Against {
    Truth,
    Observed,
}

impl From<Against> for EvalTarget {
    fn from(a: Against) -> Self {
        match a {
            Against::Truth => EvalTarget::Truth,
            Against::Observed => EvalTarget::Observed,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn module_of(e: &Error) -> &'static str {
    match e {
        Error::NotPositiveDefinite { .. } | Error::NonSymmetric { .. } => "linalg",
        Error::SizeGuard { .. } => "baselines",
        Error::IntegrationFailure { .. } | Error::SchemaVersion { .. } | Error::Parse(_) => {
            "datagen"
        }
        Error::DegenerateTargets(_) | Error::NonPositiveVariance(_) => "metrics",
        Error::AllRestartsFailed { .. } | Error::InsufficientPoints { .. } => "grouped",
        Error::AllRunsFailed { .. } => "harness",
        Error::Io(_) | Error::Json(_) => "io",
        _ => "input",
    }
}

fn load_config(common: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io(_) => Failure::Runtime(e),
            other => Failure::Usage(other.to_string()),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &common.out {
        c.out = o.clone();
    }
    if let Some(s) = common.seed {
        c.seed = s;
    }
    Ok(c)
}

fn parse_methods(names: &[String]) -> std::result::Result<Vec<Method>, Failure> {
    names
        .iter()
        .map(|n| {
            n.parse::<Method>()
                .map_err(|e| Failure::Usage(e.to_string()))
        })
        .collect()
}

fn finish(
    out: &Path,
    files: Vec<super::experiment::FileEntry>,
    timings: Vec<FitTiming>,
    start: Instant,
) -> Result<()> {
    let manifest = Manifest {
        files,
        timings,
        total_seconds: start.elapsed().as_secs_f64(),
        records: Vec::new(),
    };
    write_manifest(out, &manifest)?;
    Ok(())
}

fn generate(config: ExperimentConfig, glucose: bool) -> Result<()> {
    let start = Instant::now();
    let source = match (&config.data, glucose) {
        (DataSource::Synthetic(_), false) | (DataSource::Glucose(_), true) => config.data.clone(),
        (_, false) => DataSource::Synthetic(SyntheticSpec::default()),
        (_, true) => DataSource::Glucose(GlucoseSpec::default()),
    };
    let data = load_data(&source, config.seed, 0)?;
    fs::create_dir_all(&config.out)?;
    let config = ExperimentConfig {
        data: source,
        ..config
    };
    let cfg = write_artifact(&config.out, "config.toml", &config.to_toml()?)?;
    let path = config.out.join("dataset.csv");
    write_dataset(&data, &path)?;
    let bytes = fs::read(&path)?;
    let entry = super::experiment::FileEntry {
        path: "dataset.csv".into(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    };
    finish(&config.out, vec![cfg, entry], Vec::new(), start)?;
    println!("wrote {} tasks to {}", data.tasks.len(), path.display());
    Ok(())
}

fn fit(config: ExperimentConfig, method: Method, m: usize) -> Result<()> {
    let start = Instant::now();
    let data = load_data(&config.data, config.seed, 0)?;
    let seed = super::experiment::fit_seed(config.seed, 0);
    let (model, outcome) = run_one(&config, &data, method, m, seed)?;
    let offset = super::experiment::prepare_tasks(&data, config.center_targets)?.1;
    fs::create_dir_all(&config.out)?;
    let saved = SavedModel::new(model, offset);
    let mut files = vec![
        write_artifact(&config.out, "config.toml", &config.to_toml()?)?,
        write_artifact(&config.out, "model.json", &(saved.to_json()? + "\n"))?,
    ];
    let mut trace = String::from("rep,method,m,iteration,elbo,mstep\n");
    trace_rows(&mut trace, 0, method, m, &outcome.trace);
    files.push(write_artifact(&config.out, "bound_trace.csv", &trace)?);
    files.push(write_artifact(
        &config.out,
        "metrics.csv",
        &outcome.report.to_csv(),
    )?);
    let timing = FitTiming {
        rep: 0,
        method,
        m,
        seconds: outcome.fit_seconds,
    };
    finish(&config.out, files, vec![timing], start)?;
    println!(
        "{} (m = {m}): objective {:.6}, mean SMSE {:.6}, mean MSLL {:.6}",
        method.name(),
        outcome.objective,
        outcome.report.mean_smse,
        outcome.report.mean_msll
    );
    Ok(())
}

fn predict(model: &Path, data: &Path, out: &Path) -> Result<()> {
    let saved = SavedModel::load(model)?;
    let data = read_dataset(data)?;
    let preds = predict_tests(&saved.model, &data, saved.target_offset, EvalTarget::Truth)?;
    let xs: Vec<String> = (0..data.dim).map(|i| format!("x{i}")).collect();
    let mut s = format!("task,point,{},mean,var\n", xs.join(","));
    for (j, (t, p)) in data.tasks.iter().zip(&preds).enumerate() {
        for i in 0..t.test.len() {
            write!(s, "{j},{i}").unwrap();
            for c in 0..data.dim {
                write!(s, ",{}", t.test.x[(i, c)]).unwrap();
            }
            writeln!(s, ",{},{}", p.mean[i], p.var[i]).unwrap();
        }
    }
    fs::create_dir_all(out)?;
    write_artifact(out, "predictions.csv", &s)?;
    println!("wrote predictions for {} tasks", data.tasks.len());
    Ok(())
}

fn eval(model: &Path, data: &Path, out: &Path, against: EvalTarget) -> Result<()> {
    let saved = SavedModel::load(model)?;
    let data = read_dataset(data)?;
    let preds = predict_tests(&saved.model, &data, saved.target_offset, against)?;
    let report = score(saved.model.method().name(), 0, &data, &preds, against)?;
    fs::create_dir_all(out)?;
    write_artifact(out, "metrics.csv", &report.to_csv())?;
    write_artifact(
        out,
        "metrics.json",
        &(serde_json::to_string_pretty(&report.summary_json())? + "\n"),
    )?;
    println!(
        "{}: mean SMSE {:.6}, mean MSLL {:.6} over {} tasks",
        report.method, report.mean_smse, report.mean_msll, report.count
    );
    Ok(())
}

fn dispatch(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::GenSynthetic(c) => generate(load_config(&c)?, false)?,
        Command::GenGlucose(c) => generate(load_config(&c)?, true)?,
        Command::Fit { common, method, m } => {
            let config = load_config(&common)?;
            let method = match method {
                Some(n) => parse_methods(&[n])?[0],
                None => config.methods[0],
            };
            let m = match m.as_deref() {
                None => config.sweep[0],
                Some([v]) if *v > 0 => *v,
                Some(_) => return Err(Failure::Usage("fit takes a single positive --m".into())),
            };
            fit(config, method, m)?
        }
        Command::Predict { model, data, out } => predict(&model, &data, &out)?,
        Command::Eval {
            model,
            data,
            out,
            against,
        } => eval(&model, &data, &out, against.into())?,
        Command::Sweep {
            common,
            method,
            m,
            reps,
        } => {
            let mut config = load_config(&common)?;
            if let Some(names) = method {
                config.methods = parse_methods(&names)?;
            }
            if let Some(m) = m {
                config.sweep = m;
            }
            if let Some(r) = reps {
                config.reps = r;
            }
            config
                .validate()
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let manifest = run_experiment(&config)?;
            let failed = manifest
                .records
                .iter()
                .filter(|r| r.outcome.is_err())
                .count();
            println!(
                "{} runs ({failed} failed) in {:.1} s; tables in {}",
                manifest.records.len(),
                manifest.total_seconds,
                config.out.display()
            );
        }
    }
    Ok(())
}

/// Runs the CLI on `argv` (including the program name) and returns the exit
/// status.
pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("megp: usage: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("megp: {}: {e}", module_of(&e));
            2
        }
    }
}
