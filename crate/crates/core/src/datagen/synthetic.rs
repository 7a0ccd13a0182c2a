//! Mixed-effect tasks sampled exactly from Gaussian processes.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{derive_seed, DataTask, Dataset, Points};
use crate::error::{Error, Result};
use crate::kernels::{se_cov, SeKernelParams};
use crate::linalg::{chol, JitterPolicy};

/// Squared-exponential kernel in natural units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub variance: f64,
    pub lengthscale: f64,
}

impl KernelSpec {
    pub fn params(&self) -> SeKernelParams {
        if self.variance == 0.0 {
            SeKernelParams::zero(1)
        } else {
            SeKernelParams::new(self.variance, &[self.lengthscale])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub points_per_task: usize,
    pub lo: f64,
    pub hi: f64,
    pub centers: usize,
    pub fixed: KernelSpec,
    pub random: KernelSpec,
    pub noise: f64,
    pub test_points: usize,
    pub seed: u64,
    /// Explicit seeds for the fixed-effect draw of each center.
    pub center_seeds: Option<Vec<u64>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            tasks: 1000,
            points_per_task: 5,
            lo: -10.0,
            hi: 10.0,
            centers: 1,
            fixed: KernelSpec {
                variance: 1.0,
                lengthscale: 1.0,
            },
            random: KernelSpec {
                variance: 0.25,
                lengthscale: 1.0,
            },
            noise: 0.1,
            test_points: 100,
            seed: 0,
            center_seeds: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lo < self.hi
            && self.tasks >= 1
            && self.points_per_task >= 1
            && self.centers >= 1
            && self.test_points >= 1
            && self.fixed.variance > 0.0
            && self.fixed.lengthscale > 0.0
            && self.random.variance >= 0.0
            && self.random.lengthscale > 0.0
            && self.noise >= 0.0
            && self
                .center_seeds
                .as_ref()
                .is_none_or(|s| s.len() == self.centers);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid synthetic spec {self:?}"
            )))
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        let n = self.test_points;
        if n == 1 {
            return vec![0.5 * (self.lo + self.hi)];
        }
        (0..n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64)
            .collect()
    }
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// One exact draw from `GP(0, k)` at `x`.
fn draw(kernel: &SeKernelParams, x: &[f64], rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let z = standard_normal(rng, x.len());
    if kernel.is_zero() {
        return Ok(DVector::zeros(x.len()));
    }
    let xm = DMatrix::from_column_slice(x.len(), 1, x);
    let f = chol(&se_cov(kernel, &xm, &xm)?, &JitterPolicy::default())?;
    Ok(f.l() * z)
}

/// Tasks whose targets are a center's fixed-effect draw plus an i.i.d.
/// per-task random-effect draw plus Gaussian noise. Labels cycle through
/// the centers (`j mod K`); every task shares the equally spaced test grid.
pub fn sample_mixed_effect(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.centers;
    let n = spec.points_per_task;
    let grid = spec.grid();
    let ng = grid.len();
    let inputs: Vec<Vec<f64>> = (0..spec.tasks)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2 * j as u64));
            (0..n).map(|_| rng.random_range(spec.lo..spec.hi)).collect()
        })
        .collect();

    let fixed = spec.fixed.params();
    // per center: values on the grid, then on each member task's inputs
    let mut fbar_task: Vec<Vec<f64>> = vec![Vec::new(); spec.tasks];
    let mut fbar_grid: Vec<Vec<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<usize> = (c..spec.tasks).step_by(k).collect();
        let mut pts = grid.clone();
        for &j in &members {
            pts.extend_from_slice(&inputs[j]);
        }
        let seed = match &spec.center_seeds {
            Some(s) => s[c],
            None => derive_seed(spec.seed, u64::MAX - c as u64),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = draw(&fixed, &pts, &mut rng).map_err(|e| e.with_context(format!("center {c}")))?;
        fbar_grid.push(f.rows(0, ng).iter().copied().collect());
        for (i, &j) in members.iter().enumerate() {
            fbar_task[j] = f.rows(ng + i * n, n).iter().copied().collect();
        }
    }

    let random = spec.random.params();
    let sd = spec.noise.sqrt();
    let mut tasks = Vec::with_capacity(spec.tasks);
    for j in 0..spec.tasks {
        let c = j % k;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2 * j as u64 + 1));
        let mut pts = inputs[j].clone();
        pts.extend_from_slice(&grid);
        let ft = draw(&random, &pts, &mut rng).map_err(|e| e.with_context(format!("task {j}")))?;
        let truth_train: Vec<f64> = (0..n).map(|i| fbar_task[j][i] + ft[i]).collect();
        let truth_test: Vec<f64> = (0..ng).map(|i| fbar_grid[c][i] + ft[n + i]).collect();
        let mut noisy = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|t| t + sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let y_train = noisy(&truth_train);
        let y_test = noisy(&truth_test);
        tasks.push(DataTask {
            label: Some(c),
            noise: None,
            train: Points {
                x: DMatrix::from_column_slice(n, 1, &inputs[j]),
                y: y_train,
                truth: truth_train,
            },
            test: Points {
                x: DMatrix::from_column_slice(ng, 1, &grid),
                y: y_test,
                truth: truth_test,
            },
        });
    }
    Ok(Dataset {
        spec: serde_json::json!({ "generator": "synthetic", "spec": spec }),
        dim: 1,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            tasks: 12,
            points_per_task: 4,
            test_points: 7,
            centers: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_labels_and_determinism() {
        let d = sample_mixed_effect(&small()).unwrap();
        assert_eq!(d.tasks.len(), 12);
        assert_eq!(d.tasks[3].label, Some(1));
        assert_eq!(d.tasks[0].train.len(), 4);
        assert_eq!(d.tasks[0].test.len(), 7);
        assert_eq!(d, sample_mixed_effect(&small()).unwrap());
        let mut other = small();
        other.seed = 6;
        assert_ne!(d, sample_mixed_effect(&other).unwrap());
    }

    #[test]
    fn noiseless_single_curve() {
        let spec = SyntheticSpec {
            centers: 1,
            noise: 0.0,
            random: KernelSpec {
                variance: 0.0,
                lengthscale: 1.0,
            },
            ..small()
        };
        let d = sample_mixed_effect(&spec).unwrap();
        for t in &d.tasks {
            assert_eq!(t.test.truth, d.tasks[0].test.truth);
            assert_eq!(t.train.y, t.train.truth);
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = SyntheticSpec {
            lo: 1.0,
            hi: 1.0,
            ..small()
        };
        assert!(sample_mixed_effect(&spec).is_err());
    }
}
