//! Repetitions × methods × inducing counts, with CSV artifacts and a
//! hashed manifest.
//!
//! Files written under the output directory:
//!
//! - `config.toml`: the effective configuration.
//! - `results.csv`: `rep,data_seed,fit_seed,method,m,k,status,objective,mean_smse,mean_msll,fit_seconds`,
//!   one row per repetition, method and inducing count. Exact inference is
//!   fitted once per repetition and repeated on every `m` row.
//! - `metrics.csv`: `rep,m,` followed by the per-task metrics columns.
//! - `bound_trace.csv`: `rep,method,m,iteration,elbo,mstep`.
//! - `sweep.csv`: `method,m,n,smse_mean,smse_sd,msll_mean,msll_sd` over
//!   successful repetitions (sample standard deviation).
//! - `manifest.json`: every file above with its SHA-256, plus fit timings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DataSource, EvalTarget, ExperimentConfig};
use crate::baselines::{fit_any, FittedModel, TaskPredictor};
use crate::datagen::{derive_seed, read_dataset, sample_mixed_effect, simulate_glucose, Dataset};
use crate::error::{Error, Result};
use crate::grouped::{GroupedModelConfig, Method, TraceEntry};
use crate::metrics::{MetricsReport, Scored};
use crate::sparse_core::{PredictiveDistribution, Task};

/// Dataset for repetition `rep` of an experiment with seed `seed`.
pub fn load_data(source: &DataSource, seed: u64, rep: usize) -> Result<Dataset> {
    let data_seed = derive_seed(seed, rep as u64);
    match source {
        DataSource::Synthetic(s) => sample_mixed_effect(&crate::datagen::SyntheticSpec {
            seed: data_seed,
            ..s.clone()
        }),
        DataSource::Glucose(g) => simulate_glucose(&crate::datagen::GlucoseSpec {
            seed: data_seed,
            ..g.clone()
        }),
        DataSource::File { path } => read_dataset(path),
    }
}

pub fn fit_seed(seed: u64, rep: usize) -> u64 {
    derive_seed(seed, 1 << 32 | rep as u64)
}

/// Training tasks, shifted by the pooled training mean when `center` is set.
pub fn prepare_tasks(data: &Dataset, center: bool) -> Result<(Vec<Task>, f64)> {
    let offset = if center {
        let ys: Vec<f64> = data
            .tasks
            .iter()
            .flat_map(|t| t.train.y.iter().copied())
            .collect();
        if ys.is_empty() {
            0.0
        } else {
            ys.iter().sum::<f64>() / ys.len() as f64
        }
    } else {
        0.0
    };
    let tasks = data
        .tasks
        .iter()
        .map(|t| {
            let y = t.train.y.iter().map(|v| v - offset).collect::<Vec<_>>();
            Task::with_noise(t.train.x.clone(), y.into(), t.noise)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((tasks, offset))
}

/// Test-point predictions for every task, in original target units.
pub fn predict_tests(
    model: &FittedModel,
    data: &Dataset,
    offset: f64,
    against: EvalTarget,
) -> Result<Vec<PredictiveDistribution>> {
    if model.tasks().len() != data.tasks.len() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} tasks, dataset {}",
            model.tasks().len(),
            data.tasks.len()
        )));
    }
    let predictor: Box<dyn TaskPredictor + '_> = model.predictor()?;
    data.tasks
        .iter()
        .enumerate()
        .map(|(j, t)| {
            if t.test.is_empty() {
                return Ok(PredictiveDistribution {
                    mean: vec![],
                    var: vec![],
                });
            }
            let mut p = predictor.predict_existing(j, &t.test.x)?;
            p.mean.iter_mut().for_each(|m| *m += offset);
            if against == EvalTarget::Observed {
                let (s2, _) = model.hyper().task_noise(&model.tasks()[j]);
                p.var.iter_mut().for_each(|v| *v += s2);
            }
            Ok(p)
        })
        .collect()
}

/// Scores predictions against the dataset's test points.
pub fn score(
    method: &str,
    seed: u64,
    data: &Dataset,
    preds: &[PredictiveDistribution],
    against: EvalTarget,
) -> Result<MetricsReport> {
    let scored: Vec<Scored<'_>> = data
        .tasks
        .iter()
        .zip(preds)
        .filter(|(t, _)| !t.test.is_empty())
        .map(|(t, p)| Scored {
            pred: p,
            y_test: match against {
                EvalTarget::Truth => &t.test.truth,
                EvalTarget::Observed => &t.test.y,
            },
            y_train: &t.train.y,
        })
        .collect();
    MetricsReport::evaluate(method, seed, &scored)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub objective: f64,
    pub fit_seconds: f64,
    pub report: MetricsReport,
    pub trace: Vec<TraceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rep: usize,
    pub data_seed: u64,
    pub fit_seed: u64,
    pub method: Method,
    pub m: usize,
    pub k: usize,
    pub outcome: std::result::Result<RunOutcome, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitTiming {
    pub rep: usize,
    pub method: Method,
    pub m: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<FileEntry>,
    pub timings: Vec<FitTiming>,
    pub total_seconds: f64,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `contents` to `dir/name` and returns its manifest entry.
pub fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<FileEntry> {
    fs::write(dir.join(name), contents)?;
    Ok(FileEntry {
        path: name.to_string(),
        sha256: sha256_hex(contents.as_bytes()),
        bytes: contents.len() as u64,
    })
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<PathBuf> {
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(path)
}

/// `rep,method,m,iteration,elbo,mstep` rows for one fit.
pub fn trace_rows(out: &mut String, rep: usize, method: Method, m: usize, trace: &[TraceEntry]) {
    for t in trace {
        let mstep = t.mstep.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{rep},{},{m},{},{},{mstep}",
            method.name(),
            t.iteration,
            t.elbo
        )
        .unwrap();
    }
}

fn model_config(config: &ExperimentConfig, m: usize, seed: u64) -> GroupedModelConfig {
    GroupedModelConfig {
        m: vec![m],
        seed,
        ..config.model.clone()
    }
}

/// Fits and scores one method on one dataset.
pub fn run_one(
    config: &ExperimentConfig,
    data: &Dataset,
    method: Method,
    m: usize,
    seed: u64,
) -> Result<(FittedModel, RunOutcome)> {
    let (tasks, offset) = prepare_tasks(data, config.center_targets)?;
    let mc = model_config(config, m, seed);
    let start = Instant::now();
    let model = if method == Method::MtSd && config.mtsd_subset_only {
        FittedModel::Grouped(crate::baselines::mtsd_fit(&tasks, &mc, true)?)
    } else {
        fit_any(&tasks, &mc, method, config.allow_large)?
    };
    let fit_seconds = start.elapsed().as_secs_f64();
    let preds = predict_tests(&model, data, offset, config.eval_against)?;
    let report = score(method.name(), seed, data, &preds, config.eval_against)?;
    let trace = match &model {
        FittedModel::Grouped(g) => g.trace.clone(),
        FittedModel::Direct(_) => Vec::new(),
    };
    let outcome = RunOutcome {
        objective: model.objective(),
        fit_seconds,
        report,
        trace,
    };
    Ok((model, outcome))
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

/// `method,m,n,smse_mean,smse_sd,msll_mean,msll_sd`
pub fn sweep_table(records: &[RunRecord]) -> String {
    let mut groups: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut order = Vec::new();
    for r in records {
        let key = (r.method.name().to_string(), r.m);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        let g = groups.entry(key).or_default();
        if let Ok(o) = &r.outcome {
            g.0.push(o.report.mean_smse);
            g.1.push(o.report.mean_msll);
        }
    }
    let mut s = String::from("method,m,n,smse_mean,smse_sd,msll_mean,msll_sd\n");
    for key in order {
        let (sm, ml) = &groups[&key];
        if sm.is_empty() {
            writeln!(s, "{},{},0,,,,", key.0, key.1).unwrap();
            continue;
        }
        let (a, b) = mean_sd(sm);
        let (c, d) = mean_sd(ml);
        writeln!(s, "{},{},{},{a},{b},{c},{d}", key.0, key.1, sm.len()).unwrap();
    }
    s
}

/// Runs every repetition, method and inducing count, writes the artifacts
/// and returns the manifest (with the in-memory records attached).
pub fn run_experiment(config: &ExperimentConfig) -> Result<Manifest> {
    config.validate()?;
    let start = Instant::now();
    let out = &config.out;
    fs::create_dir_all(out)?;
    let mut files = vec![write_artifact(out, "config.toml", &config.to_toml()?)?];
    let mut records = Vec::new();
    let mut timings = Vec::new();
    let mut results = String::from(
        "rep,data_seed,fit_seed,method,m,k,status,objective,mean_smse,mean_msll,fit_seconds\n",
    );
    let mut metrics = String::from("rep,m,method,seed,task,n_test,smse,msll,pooled_trivial\n");
    let mut traces = String::from("rep,method,m,iteration,elbo,mstep\n");

    for rep in 0..config.reps {
        let data_seed = derive_seed(config.seed, rep as u64);
        let seed = fit_seed(config.seed, rep);
        let data = match load_data(&config.data, config.seed, rep) {
            Ok(d) => d,
            Err(e) => {
                warn!("rep {rep}: data generation failed: {e}");
                for &method in &config.methods {
                    for &m in &config.sweep {
                        records.push(RunRecord {
                            rep,
                            data_seed,
                            fit_seed: seed,
                            method,
                            m,
                            k: config.model.k,
                            outcome: Err(format!("datagen: {e}")),
                        });
                    }
                }
                continue;
            }
        };
        for &method in &config.methods {
            // exact inference does not depend on m
            let mut direct: Option<std::result::Result<RunOutcome, String>> = None;
            for &m in &config.sweep {
                let outcome = if method == Method::Direct && direct.is_some() {
                    direct.clone().expect("checked")
                } else {
                    info!("rep {rep}: fitting {} (m = {m})", method.name());
                    let o = run_one(config, &data, method, m, seed)
                        .map(|(_, o)| o)
                        .map_err(|e| format!("{}: {e}", method.name()));
                    if let Ok(o) = &o {
                        timings.push(FitTiming {
                            rep,
                            method,
                            m,
                            seconds: o.fit_seconds,
                        });
                        trace_rows(&mut traces, rep, method, m, &o.trace);
                    }
                    if method == Method::Direct {
                        direct = Some(o.clone());
                    }
                    o
                };
                let k = config.model.k;
                match &outcome {
                    Ok(o) => {
                        writeln!(
                            results,
                            "{rep},{data_seed},{seed},{},{m},{k},ok,{},{},{},{}",
                            method.name(),
                            o.objective,
                            o.report.mean_smse,
                            o.report.mean_msll,
                            o.fit_seconds
                        )
                        .unwrap();
                        for line in o.report.to_csv().lines().skip(1) {
                            writeln!(metrics, "{rep},{m},{line}").unwrap();
                        }
                    }
                    Err(e) => {
                        warn!("rep {rep}: {e}");
                        let msg = e.replace([',', '\n'], ";");
                        writeln!(
                            results,
                            "{rep},{data_seed},{seed},{},{m},{k},error: {msg},,,,",
                            method.name()
                        )
                        .unwrap();
                    }
                }
                records.push(RunRecord {
                    rep,
                    data_seed,
                    fit_seed: seed,
                    method,
                    m,
                    k,
                    outcome,
                });
            }
        }
    }

    files.push(write_artifact(out, "results.csv", &results)?);
    files.push(write_artifact(out, "metrics.csv", &metrics)?);
    files.push(write_artifact(out, "bound_trace.csv", &traces)?);
    files.push(write_artifact(out, "sweep.csv", &sweep_table(&records))?);
    let manifest = Manifest {
        files,
        timings,
        total_seconds: start.elapsed().as_secs_f64(),
        records,
    };
    write_manifest(out, &manifest)?;
    if manifest.records.iter().all(|r| r.outcome.is_err()) {
        let first = manifest
            .records
            .first()
            .and_then(|r| r.outcome.clone().err());
        return Err(Error::AllRunsFailed {
            attempts: manifest.records.len(),
            first: first.unwrap_or_default(),
        });
    }
    Ok(manifest)
}
