//! Reproducible benchmark data: GP-sampled mixed-effect tasks and a glucose
//! minimal-model cohort, plus the dataset file format.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sparse_core::Task;

pub mod glucose;
pub mod io;
pub mod synthetic;

pub use glucose::{simulate_glucose, GlucoseSpec, InsulinProfile};
pub use io::{read_dataset, write_dataset};
pub use synthetic::{sample_mixed_effect, KernelSpec, SyntheticSpec};

/// Points of one split: inputs, observed targets and noiseless values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Points {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub truth: Vec<f64>,
}

impl Points {
    pub fn empty(dim: usize) -> Self {
        Points {
            x: DMatrix::zeros(0, dim),
            y: Vec::new(),
            truth: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataTask {
    /// Generating center, when known.
    pub label: Option<usize>,
    /// Task-specific noise variance, when it differs from the shared one.
    pub noise: Option<f64>,
    pub train: Points,
    pub test: Points,
}

impl DataTask {
    pub fn to_task(&self) -> Result<Task> {
        Task::with_noise(
            self.train.x.clone(),
            self.train.y.clone().into(),
            self.noise,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Echo of the generating spec (free-form JSON).
    pub spec: serde_json::Value,
    pub dim: usize,
    pub tasks: Vec<DataTask>,
}

impl Dataset {
    /// Training tasks in file order.
    pub fn training_tasks(&self) -> Result<Vec<Task>> {
        self.tasks.iter().map(DataTask::to_task).collect()
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.tasks.iter().map(|t| t.label).collect()
    }
}

/// Decorrelated seed for stream `stream` of a base seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
