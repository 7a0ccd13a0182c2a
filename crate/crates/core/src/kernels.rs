//! Squared-exponential covariance, mixed-effect covariance assembly and
//! analytic derivatives.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Squared-exponential (ARD) kernel parameters, stored in log space.
///
/// `k(a, b) = s² exp(−Σ_r (a_r − b_r)² / (2 ℓ_r²))`
///
/// A signal log-variance of `-inf` switches the kernel off (all entries 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeKernelParams {
    pub log_signal_variance: f64,
    pub log_lengthscale: Vec<f64>,
}

impl SeKernelParams {
    pub fn new(signal_variance: f64, lengthscales: &[f64]) -> Self {
        SeKernelParams {
            log_signal_variance: signal_variance.ln(),
            log_lengthscale: lengthscales.iter().map(|l| l.ln()).collect(),
        }
    }

    pub fn isotropic(signal_variance: f64, lengthscale: f64, dim: usize) -> Self {
        Self::new(signal_variance, &vec![lengthscale; dim])
    }

    /// A kernel that is identically zero.
    pub fn zero(dim: usize) -> Self {
        SeKernelParams {
            log_signal_variance: f64::NEG_INFINITY,
            log_lengthscale: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscale.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn lengthscale(&self, r: usize) -> f64 {
        self.log_lengthscale[r].exp()
    }

    pub fn is_zero(&self) -> bool {
        self.log_signal_variance == f64::NEG_INFINITY
    }

    pub fn n_params(&self) -> usize {
        1 + self.dim()
    }

    pub fn get(&self, p: KernelParam) -> Result<f64> {
        match p {
            KernelParam::LogSignalVariance => Ok(self.log_signal_variance),
            KernelParam::LogLengthscale(r) => self
                .log_lengthscale
                .get(r)
                .copied()
                .ok_or_else(|| Error::UnknownParameter(format!("lengthscale {r}"))),
        }
    }

    pub fn set(&mut self, p: KernelParam, value: f64) -> Result<()> {
        match p {
            KernelParam::LogSignalVariance => self.log_signal_variance = value,
            KernelParam::LogLengthscale(r) => {
                *self
                    .log_lengthscale
                    .get_mut(r)
                    .ok_or_else(|| Error::UnknownParameter(format!("lengthscale {r}")))? = value
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<KernelParam> {
        std::iter::once(KernelParam::LogSignalVariance)
            .chain((0..self.dim()).map(KernelParam::LogLengthscale))
            .collect()
    }

    fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscale
            .iter()
            .map(|l| (-2.0 * l).exp())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ok_signal = self.log_signal_variance.is_finite() || self.is_zero();
        if !ok_signal || self.log_lengthscale.iter().any(|l| !l.is_finite()) || self.dim() == 0 {
            return Err(Error::InvalidInput(format!(
                "invalid kernel parameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// Observation noise `σ²`, in log space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub log_noise_variance: f64,
    /// Whether tasks carrying their own `σ_j²` override the shared value.
    pub per_task: bool,
}

impl NoiseParams {
    pub fn shared(variance: f64) -> Self {
        NoiseParams {
            log_noise_variance: variance.ln(),
            per_task: false,
        }
    }

    pub fn variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }
}

/// A hyperparameter of a single kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KernelParam {
    LogSignalVariance,
    LogLengthscale(usize),
}

/// What a kernel derivative is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradWrt {
    Param(KernelParam),
    /// Coordinate `dim` of row `row` of the first argument only.
    PointOfA {
        row: usize,
        dim: usize,
    },
    /// Coordinate of a row shared by both arguments (Gram matrix `K(A, A)`).
    PointOfBoth {
        row: usize,
        dim: usize,
    },
}

/// Interface for stationary covariance functions with analytic derivatives.
pub trait Covariance {
    fn cov(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>>;
    fn cov_grad(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, wrt: GradWrt) -> Result<DMatrix<f64>>;
}

impl Covariance for SeKernelParams {
    fn cov(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        se_cov(self, a, b)
    }

    fn cov_grad(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, wrt: GradWrt) -> Result<DMatrix<f64>> {
        se_cov_grad(self, a, b, wrt)
    }
}

fn check_dims(params: &SeKernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.ncols() != params.dim() || b.ncols() != params.dim() {
        return Err(Error::DimensionMismatch(format!(
            "kernel of dimension {} applied to points of dimension {} and {}",
            params.dim(),
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Cross-covariance matrix `K(A, B)` for row-wise point sets.
pub fn se_cov(params: &SeKernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims(params, a, b)?;
    let s2 = params.signal_variance();
    let inv = params.inv_sq_lengthscales();
    let (n, p, d) = (a.nrows(), b.nrows(), params.dim());
    let mut out = DMatrix::zeros(n, p);
    if s2 == 0.0 {
        return Ok(out);
    }
    for j in 0..p {
        for i in 0..n {
            let mut q = 0.0;
            for r in 0..d {
                let diff = a[(i, r)] - b[(j, r)];
                q += diff * diff * inv[r];
            }
            out[(i, j)] = s2 * (-0.5 * q).exp();
        }
    }
    Ok(out)
}

/// Elementwise derivative of [`se_cov`] in log-parameter space, or in input
/// space for point coordinates.
pub fn se_cov_grad(
    params: &SeKernelParams,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    wrt: GradWrt,
) -> Result<DMatrix<f64>> {
    let k = se_cov(params, a, b)?;
    let inv = params.inv_sq_lengthscales();
    match wrt {
        GradWrt::Param(KernelParam::LogSignalVariance) => Ok(k),
        GradWrt::Param(KernelParam::LogLengthscale(r)) => {
            if r >= params.dim() {
                return Err(Error::UnknownParameter(format!("lengthscale {r}")));
            }
            let mut out = k;
            for j in 0..b.nrows() {
                for i in 0..a.nrows() {
                    let diff = a[(i, r)] - b[(j, r)];
                    out[(i, j)] *= diff * diff * inv[r];
                }
            }
            Ok(out)
        }
        GradWrt::PointOfA { row, dim } => {
            if row >= a.nrows() || dim >= params.dim() {
                return Err(Error::UnknownParameter(format!("point ({row}, {dim})")));
            }
            let mut out = DMatrix::zeros(a.nrows(), b.nrows());
            for j in 0..b.nrows() {
                out[(row, j)] = k[(row, j)] * (b[(j, dim)] - a[(row, dim)]) * inv[dim];
            }
            Ok(out)
        }
        GradWrt::PointOfBoth { row, dim } => {
            if a.nrows() != b.nrows() || row >= a.nrows() || dim >= params.dim() {
                return Err(Error::UnknownParameter(format!(
                    "shared point ({row}, {dim})"
                )));
            }
            let mut out = DMatrix::zeros(a.nrows(), b.nrows());
            for j in 0..b.nrows() {
                if j == row {
                    continue;
                }
                let g = k[(row, j)] * (b[(j, dim)] - a[(row, dim)]) * inv[dim];
                out[(row, j)] = g;
                out[(j, row)] = g;
            }
            Ok(out)
        }
    }
}

/// `K†` over labelled point sets: the fixed-effect kernel everywhere plus
/// the random-effect kernel on blocks whose task ids agree.
pub fn mixed_effect_cov(
    fixed: &SeKernelParams,
    random: &SeKernelParams,
    rows: &[(usize, &DMatrix<f64>)],
    cols: &[(usize, &DMatrix<f64>)],
) -> Result<DMatrix<f64>> {
    let nr: usize = rows.iter().map(|(_, x)| x.nrows()).sum();
    let nc: usize = cols.iter().map(|(_, x)| x.nrows()).sum();
    let mut out = DMatrix::zeros(nr, nc);
    let mut ro = 0;
    for (ti, xa) in rows {
        let mut co = 0;
        for (tj, xb) in cols {
            let mut blk = se_cov(fixed, xa, xb)?;
            if ti == tj {
                blk += se_cov(random, xa, xb)?;
            }
            out.view_mut((ro, co), blk.shape()).copy_from(&blk);
            co += xb.nrows();
        }
        ro += xa.nrows();
    }
    Ok(out)
}
