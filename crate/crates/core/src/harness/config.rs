//! Experiment configuration, read from TOML.
//!
//! ```toml
//! methods = ["MT-VAR", "MT-SD", "Direct"]
//! sweep = [10, 20, 40]
//! reps = 10
//! seed = 7
//! out = "out"
//!
//! [data]
//! generator = "synthetic"
//! tasks = 200
//!
//! [model]
//! k = 1
//! restarts = 1
//! ```
//!
//! Every field is optional. The experiment seed drives everything: the
//! generator seed inside `[data]` is replaced by a per-repetition seed and
//! `model.m` by the sweep value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{GlucoseSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::grouped::{GroupedModelConfig, Method};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Glucose(GlucoseSpec),
    /// A dataset file; every repetition refits the same data.
    File {
        path: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// What test predictions are scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    /// Noiseless values, with the latent predictive variance.
    #[default]
    Truth,
    /// Noisy observations, with the noise variance added.
    Observed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub methods: Vec<Method>,
    pub model: GroupedModelConfig,
    /// Inducing counts; each repetition fits every method at every value.
    pub sweep: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Subtract the pooled training mean before fitting.
    pub center_targets: bool,
    pub eval_against: EvalTarget,
    /// Lift the size guard of exact inference.
    pub allow_large: bool,
    /// MT-SD learns hyperparameters from the tasks owning subset points only.
    pub mtsd_subset_only: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            methods: vec![Method::MtVar],
            model: GroupedModelConfig::default(),
            sweep: vec![20],
            reps: 10,
            seed: 0,
            out: PathBuf::from("out"),
            center_targets: true,
            eval_against: EvalTarget::Truth,
            allow_large: false,
            mtsd_subset_only: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.reps == 0 {
            return bad("reps must be at least 1");
        }
        if self.sweep.is_empty() || self.sweep.contains(&0) {
            return bad("sweep values must be at least 1");
        }
        let mut s = self.sweep.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.sweep.len() {
            return bad("sweep values must be unique");
        }
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        self.model.validate()
    }
}
