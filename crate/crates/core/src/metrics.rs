//! SMSE and MSLL.
//!
//! Both normalizers use the population (1/n) variance, so predicting the
//! test mean scores an SMSE of exactly 1 at any n.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse_core::PredictiveDistribution;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{a} predictions for {b} targets"
        )));
    }
    Ok(())
}

/// Mean squared error over the variance of the test targets.
pub fn smse(pred_mean: &[f64], y_test: &[f64]) -> Result<f64> {
    check_len(pred_mean.len(), y_test.len())?;
    let (_, var) = mean_var(y_test);
    if !(var > 0.0) {
        return Err(Error::DegenerateTargets(
            "test targets have zero variance".into(),
        ));
    }
    let mse = pred_mean
        .iter()
        .zip(y_test)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / y_test.len() as f64;
    Ok(mse / var)
}

/// Gaussian fitted to training targets: `(mean, population variance)`.
pub fn trivial_model(y_train: &[f64]) -> Result<(f64, f64)> {
    if y_train.len() < 2 {
        return Err(Error::InsufficientPoints {
            requested: 2,
            available: y_train.len(),
        });
    }
    let (m, v) = mean_var(y_train);
    if !(v > 0.0) {
        return Err(Error::DegenerateTargets(
            "training targets have zero variance".into(),
        ));
    }
    Ok((m, v))
}

fn nlpd(y: f64, mean: f64, var: f64) -> f64 {
    0.5 * (LN_2PI + var.ln() + (y - mean).powi(2) / var)
}

/// Mean standardized log loss against an explicit trivial Gaussian.
pub fn msll_with(
    pred_mean: &[f64],
    pred_var: &[f64],
    y_test: &[f64],
    trivial: (f64, f64),
) -> Result<f64> {
    check_len(pred_mean.len(), y_test.len())?;
    check_len(pred_var.len(), y_test.len())?;
    if let Some(i) = pred_var.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::NonPositiveVariance(i));
    }
    let (tm, tv) = trivial;
    if !(tv > 0.0) {
        return Err(Error::NonPositiveVariance(0));
    }
    let total: f64 = (0..y_test.len())
        .map(|i| nlpd(y_test[i], pred_mean[i], pred_var[i]) - nlpd(y_test[i], tm, tv))
        .sum();
    Ok(total / y_test.len() as f64)
}

/// Mean standardized log loss; the trivial model is fitted to `y_train`.
pub fn msll(pred_mean: &[f64], pred_var: &[f64], y_test: &[f64], y_train: &[f64]) -> Result<f64> {
    msll_with(pred_mean, pred_var, y_test, trivial_model(y_train)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub n_test: usize,
    pub smse: f64,
    pub msll: f64,
    /// The trivial model came from the pooled training targets.
    pub pooled_trivial: bool,
}

/// Per-task metrics and their averages for one fitted method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub tasks: Vec<TaskMetrics>,
    pub mean_smse: f64,
    pub mean_msll: f64,
    pub count: usize,
}

/// One task's prediction with the targets it is scored against.
pub struct Scored<'a> {
    pub pred: &'a PredictiveDistribution,
    pub y_test: &'a [f64],
    pub y_train: &'a [f64],
}

impl MetricsReport {
    /// Scores every task. A task whose own training targets cannot define a
    /// trivial Gaussian (fewer than two, or constant) uses the pooled
    /// training targets of all tasks instead.
    pub fn evaluate(method: &str, seed: u64, scored: &[Scored<'_>]) -> Result<Self> {
        if scored.is_empty() {
            return Err(Error::InvalidInput("no tasks to evaluate".into()));
        }
        let pooled: Vec<f64> = scored
            .iter()
            .flat_map(|s| s.y_train.iter().copied())
            .collect();
        let mut pooled_model = None;
        let mut tasks = Vec::with_capacity(scored.len());
        for (j, s) in scored.iter().enumerate() {
            let ctx = |e: Error| Error::InvalidInput(format!("task {j}: {e}"));
            let (trivial, used_pool) = match trivial_model(s.y_train) {
                Ok(t) => (t, false),
                Err(_) => {
                    if pooled_model.is_none() {
                        pooled_model = Some(trivial_model(&pooled).map_err(ctx)?);
                    }
                    (pooled_model.expect("set above"), true)
                }
            };
            tasks.push(TaskMetrics {
                task: j,
                n_test: s.y_test.len(),
                smse: smse(&s.pred.mean, s.y_test).map_err(ctx)?,
                msll: msll_with(&s.pred.mean, &s.pred.var, s.y_test, trivial).map_err(ctx)?,
                pooled_trivial: used_pool,
            });
        }
        let count = tasks.len();
        let mean_smse = tasks.iter().map(|t| t.smse).sum::<f64>() / count as f64;
        let mean_msll = tasks.iter().map(|t| t.msll).sum::<f64>() / count as f64;
        Ok(MetricsReport {
            method: method.to_string(),
            seed,
            tasks,
            mean_smse,
            mean_msll,
            count,
        })
    }

    /// `method,seed,task,n_test,smse,msll,pooled_trivial`, one row per task.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,seed,task,n_test,smse,msll,pooled_trivial\n");
        for t in &self.tasks {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.method, self.seed, t.task, t.n_test, t.smse, t.msll, t.pooled_trivial
            )
            .unwrap();
        }
        s
    }

    /// `{"method", "seed", "count", "mean_smse", "mean_msll"}`
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.method,
            "seed": self.seed,
            "count": self.count,
            "mean_smse": self.mean_smse,
            "mean_msll": self.mean_msll,
        })
    }
}
