//! Single-center sparse mixed-effect model: variational lower bound, its
//! gradient, the optimal inducing posterior and the sparse predictive.
//!
//! The evaluation engine here is written for responsibility-weighted
//! centers so the grouped model reuses it unchanged; the single-center
//! operations are the `K = 1`, `r ≡ 1` special case.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{se_cov, KernelParam, NoiseParams, SeKernelParams};
use crate::linalg::{chol, chol_at, frobenius_dot, symmetrize, CholFactor, JitterPolicy};

/// Responsibilities below this are clamped before scaling noise blocks.
pub const R_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One time series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    x: DMatrix<f64>,
    y: DVector<f64>,
    noise: Option<f64>,
}

impl Task {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        Self::with_noise(x, y, None)
    }

    pub fn with_noise(x: DMatrix<f64>, y: DVector<f64>, noise: Option<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyTask);
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite task data".into()));
        }
        if let Some(s) = noise {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "task noise {s} must be positive"
                )));
            }
        }
        Ok(Task { x, y, noise })
    }

    /// One-dimensional convenience constructor.
    pub fn from_1d(x: &[f64], y: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_column_slice(x.len(), 1, x),
            DVector::from_column_slice(y),
        )
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn noise(&self) -> Option<f64> {
        self.noise
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Pseudo-input locations of one center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    z: DMatrix<f64>,
    pub learnable: bool,
}

impl InducingSet {
    pub fn new(z: DMatrix<f64>, learnable: bool) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::InvalidInput(
                "inducing set must have at least one point".into(),
            ));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite inducing location".into()));
        }
        for i in 0..z.nrows() {
            for j in 0..i {
                if (z.row(i) - z.row(j)).amax() <= 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "inducing rows {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(InducingSet { z, learnable })
    }

    pub fn from_1d(z: &[f64], learnable: bool) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(z.len(), 1, z), learnable)
    }

    /// Every distinct training input (rows compared exactly).
    pub fn all_inputs(tasks: &[Task], learnable: bool) -> Result<Self> {
        Self::new(distinct_inputs(tasks), learnable)
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub(crate) fn set(&mut self, row: usize, dim: usize, v: f64) {
        self.z[(row, dim)] = v;
    }
}

/// Distinct input rows across tasks, in order of first appearance.
pub fn distinct_inputs(tasks: &[Task]) -> DMatrix<f64> {
    let d = tasks.first().map_or(1, Task::dim);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in tasks {
        for i in 0..t.len() {
            let row: Vec<f64> = t.x.row(i).iter().copied().collect();
            let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
            if seen.insert(key) {
                rows.push(row);
            }
        }
    }
    DMatrix::from_fn(rows.len(), d, |i, r| rows[i][r])
}

/// Gaussian posterior `N(μ, A)` over inducing values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Whitened form saved when the posterior was computed. Recovering it
    /// from `A` through an ill-conditioned `K_mm` loses the small
    /// eigenvalues, so consumers use this copy while it still applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whitened: Option<WhitenedPosterior>,
}

/// `(L⁻¹μ, L⁻¹AL⁻ᵀ)` with `K_mm = LLᵀ` for one inducing set and kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitenedPosterior {
    pub z: DMatrix<f64>,
    pub kernel: SeKernelParams,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Absolute jitter on `K_mm` that `L` refers to.
    #[serde(default)]
    pub jitter: f64,
}

impl InducingPosterior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        InducingPosterior {
            mean,
            cov,
            whitened: None,
        }
    }

    /// Whitened mean and covariance relative to `kf`, the factor of the
    /// kernel `fixed` at `z`.
    /// Factor of `K_mm` at `z`, at the jitter the cached whitened form was
    /// computed with when that cache applies.
    pub fn kmm_factor(&self, fixed: &SeKernelParams, z: &DMatrix<f64>) -> Result<CholFactor> {
        let kmm = se_cov(fixed, z, z)?;
        match &self.whitened {
            Some(w) if &w.z == z && &w.kernel == fixed => chol_at(&kmm, w.jitter),
            _ => chol(&kmm, &JitterPolicy::default()),
        }
        .map_err(|e| e.with_context("K_mm"))
    }

    pub fn whitened(
        &self,
        fixed: &SeKernelParams,
        z: &DMatrix<f64>,
        kf: &CholFactor,
    ) -> (DVector<f64>, DMatrix<f64>) {
        if let Some(w) = &self.whitened {
            if &w.z == z && &w.kernel == fixed && w.jitter == kf.jitter() {
                return (w.mean.clone(), w.cov.clone());
            }
        }
        let mean = kf.solve_lower(&DMatrix::from_column_slice(
            self.mean.len(),
            1,
            self.mean.as_slice(),
        ));
        let half = kf.solve_lower(&self.cov);
        (
            mean.column(0).into_owned(),
            symmetrize(&kf.solve_lower(&half.transpose())),
        )
    }
}

/// Pointwise predictive moments of the latent `f^j(x*)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Kernel and noise hyperparameters.
///
/// `fixed` holds one kernel shared by all centers, or one per center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub fixed: Vec<SeKernelParams>,
    pub random: SeKernelParams,
    pub noise: NoiseParams,
}

impl Hyperparams {
    pub fn new(fixed: SeKernelParams, random: SeKernelParams, noise: NoiseParams) -> Self {
        Hyperparams {
            fixed: vec![fixed],
            random,
            noise,
        }
    }

    /// Fixed-effect kernel used by `center`.
    pub fn fixed_for(&self, center: usize) -> &SeKernelParams {
        &self.fixed[if self.fixed.len() == 1 { 0 } else { center }]
    }

    pub fn kernel_index(&self, center: usize) -> usize {
        if self.fixed.len() == 1 {
            0
        } else {
            center
        }
    }

    pub fn task_noise(&self, task: &Task) -> (f64, bool) {
        match (self.noise.per_task, task.noise) {
            (true, Some(s)) => (s, false),
            _ => (self.noise.variance(), true),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fixed.is_empty() {
            return Err(Error::InvalidInput("no fixed-effect kernel".into()));
        }
        let d = self.random.dim();
        for k in &self.fixed {
            k.validate()?;
            if k.dim() != d {
                return Err(Error::DimensionMismatch("kernel dimensions differ".into()));
            }
        }
        self.random.validate()?;
        if !self.noise.log_noise_variance.is_finite() {
            return Err(Error::InvalidInput(
                "noise variance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A single optimizable coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Coord {
    /// Parameter of fixed-effect kernel `kernel` (index into `Hyperparams::fixed`).
    Fixed {
        kernel: usize,
        param: KernelParam,
    },
    Random(KernelParam),
    Noise,
    Inducing {
        center: usize,
        row: usize,
        dim: usize,
    },
}

/// Hyperparameters plus inducing locations for every center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub hyper: Hyperparams,
    pub inducing: Vec<InducingSet>,
}

impl ModelParams {
    pub fn new(hyper: Hyperparams, inducing: Vec<InducingSet>) -> Result<Self> {
        hyper.validate()?;
        if inducing.is_empty() {
            return Err(Error::InvalidInput("no centers".into()));
        }
        if hyper.fixed.len() != 1 && hyper.fixed.len() != inducing.len() {
            return Err(Error::InvalidInput(format!(
                "{} fixed kernels for {} centers",
                hyper.fixed.len(),
                inducing.len()
            )));
        }
        for s in &inducing {
            if s.z.ncols() != hyper.random.dim() {
                return Err(Error::DimensionMismatch("inducing dimension".into()));
            }
        }
        Ok(ModelParams { hyper, inducing })
    }

    pub fn n_centers(&self) -> usize {
        self.inducing.len()
    }

    /// Every coordinate, learnable or not.
    pub fn all_coords(&self) -> Vec<Coord> {
        let mut out = Vec::new();
        for (k, kern) in self.hyper.fixed.iter().enumerate() {
            out.extend(
                kern.params()
                    .into_iter()
                    .map(|param| Coord::Fixed { kernel: k, param }),
            );
        }
        out.extend(self.hyper.random.params().into_iter().map(Coord::Random));
        out.push(Coord::Noise);
        for (c, s) in self.inducing.iter().enumerate() {
            for row in 0..s.len() {
                for dim in 0..s.z.ncols() {
                    out.push(Coord::Inducing {
                        center: c,
                        row,
                        dim,
                    });
                }
            }
        }
        out
    }

    /// Coordinates the optimizer may move: a switched-off random effect and
    /// frozen inducing sets are excluded.
    pub fn free_coords(&self) -> Vec<Coord> {
        self.all_coords()
            .into_iter()
            .filter(|c| match c {
                Coord::Random(_) => !self.hyper.random.is_zero(),
                Coord::Inducing { center, .. } => self.inducing[*center].learnable,
                _ => true,
            })
            .collect()
    }

    pub fn get(&self, c: Coord) -> Result<f64> {
        match c {
            Coord::Fixed { kernel, param } => self
                .hyper
                .fixed
                .get(kernel)
                .ok_or_else(|| Error::UnknownParameter(format!("{c:?}")))?
                .get(param),
            Coord::Random(p) => self.hyper.random.get(p),
            Coord::Noise => Ok(self.hyper.noise.log_noise_variance),
            Coord::Inducing { center, row, dim } => self
                .inducing
                .get(center)
                .and_then(|s| s.z.get((row, dim)).copied())
                .ok_or_else(|| Error::UnknownParameter(format!("{c:?}"))),
        }
    }

    pub fn set(&mut self, c: Coord, v: f64) -> Result<()> {
        match c {
            Coord::Fixed { kernel, param } => self
                .hyper
                .fixed
                .get_mut(kernel)
                .ok_or_else(|| Error::UnknownParameter(format!("{c:?}")))?
                .set(param, v),
            Coord::Random(p) => self.hyper.random.set(p, v),
            Coord::Noise => {
                self.hyper.noise.log_noise_variance = v;
                Ok(())
            }
            Coord::Inducing { center, row, dim } => {
                let s = self
                    .inducing
                    .get_mut(center)
                    .ok_or_else(|| Error::UnknownParameter(format!("{c:?}")))?;
                if row >= s.len() || dim >= s.z.ncols() {
                    return Err(Error::UnknownParameter(format!("{c:?}")));
                }
                s.set(row, dim, v);
                Ok(())
            }
        }
    }
}

/// Gradient over [`ModelParams::all_coords`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub coords: Vec<Coord>,
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn get(&self, c: Coord) -> Option<f64> {
        self.coords
            .iter()
            .position(|x| *x == c)
            .map(|i| self.values[i])
    }
}

/// Per-task quantities that depend only on the random effect and noise.
#[derive(Clone, Debug)]
pub(crate) struct TaskCache {
    pub khat: CholFactor,
    pub khat_inv: DMatrix<f64>,
    pub krand: DMatrix<f64>,
    /// `K̂⁻¹ y`
    pub u: DVector<f64>,
    pub y_khat_y: f64,
    pub noise: f64,
    pub shared_noise: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct CacheKey {
    random: SeKernelParams,
    noise: NoiseParams,
}

/// Cached per-task factors for a fixed task list.
///
/// The cache is keyed on the random-effect kernel and noise, so moving a
/// fixed-effect parameter or an inducing point reuses the task factors.
#[derive(Clone, Debug)]
pub struct BoundWorkspace {
    pub(crate) x_all: DMatrix<f64>,
    pub(crate) y_all: DVector<f64>,
    pub(crate) offsets: Vec<usize>,
    pub(crate) sizes: Vec<usize>,
    pub(crate) policy: JitterPolicy,
    key: Option<CacheKey>,
    caches: Vec<TaskCache>,
    version: u64,
}

impl BoundWorkspace {
    pub fn new(tasks: &[Task]) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidInput("at least one task is required".into()));
        }
        let d = tasks[0].dim();
        if tasks.iter().any(|t| t.dim() != d) {
            return Err(Error::DimensionMismatch(
                "tasks have different input dimensions".into(),
            ));
        }
        let n: usize = tasks.iter().map(Task::len).sum();
        let mut x_all = DMatrix::zeros(n, d);
        let mut y_all = DVector::zeros(n);
        let mut offsets = Vec::with_capacity(tasks.len());
        let mut sizes = Vec::with_capacity(tasks.len());
        let mut o = 0;
        for t in tasks {
            x_all.rows_mut(o, t.len()).copy_from(&t.x);
            y_all.rows_mut(o, t.len()).copy_from(&t.y);
            offsets.push(o);
            sizes.push(t.len());
            o += t.len();
        }
        Ok(BoundWorkspace {
            x_all,
            y_all,
            offsets,
            sizes,
            policy: JitterPolicy::default(),
            key: None,
            caches: Vec::new(),
            version: 0,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_total(&self) -> usize {
        self.y_all.len()
    }

    /// Incremented every time the task caches are rebuilt.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn task_x(&self, j: usize) -> DMatrix<f64> {
        self.x_all.rows(self.offsets[j], self.sizes[j]).into_owned()
    }

    pub(crate) fn caches(&mut self, tasks: &[Task], hyper: &Hyperparams) -> Result<&[TaskCache]> {
        if tasks.len() != self.sizes.len() {
            return Err(Error::DimensionMismatch(
                "workspace built for a different task list".into(),
            ));
        }
        let key = CacheKey {
            random: hyper.random.clone(),
            noise: hyper.noise.clone(),
        };
        if self.key.as_ref() != Some(&key) {
            self.caches = tasks
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    task_cache(t, hyper, &self.policy)
                        .map_err(|e| e.with_context(format!("task {j}")))
                })
                .collect::<Result<_>>()?;
            self.key = Some(key);
            self.version += 1;
        }
        Ok(&self.caches)
    }
}

fn task_cache(t: &Task, hyper: &Hyperparams, policy: &JitterPolicy) -> Result<TaskCache> {
    let krand = se_cov(&hyper.random, &t.x, &t.x)?;
    let (noise, shared_noise) = hyper.task_noise(t);
    let mut khat_m = krand.clone();
    for i in 0..t.len() {
        khat_m[(i, i)] += noise;
    }
    let khat = chol(&khat_m, policy)?;
    let khat_inv = khat.inverse();
    let u = &khat_inv * &t.y;
    let y_khat_y = t.y.dot(&u);
    Ok(TaskCache {
        khat,
        khat_inv,
        krand,
        u,
        y_khat_y,
        noise,
        shared_noise,
    })
}

/// One center's weights over tasks: `w` (clamped) scales the noise blocks,
/// `r` (unclamped) weights the trace penalty.
pub(crate) struct CenterWeights<'a> {
    pub w: &'a [f64],
    pub r: &'a [f64],
}

pub(crate) struct CenterGrad {
    /// d/d(log s², log ℓ_1, ...) of the center's fixed-effect kernel.
    pub fixed: Vec<f64>,
    /// d/dZ, `m × d`.
    pub inducing: DMatrix<f64>,
    /// dL/dK̂_j for each task.
    pub dkhat: Vec<DMatrix<f64>>,
}

pub(crate) struct CenterOutput {
    pub logpr: f64,
    pub trace: f64,
    pub grad: Option<CenterGrad>,
}

fn row_scale(m: &DMatrix<f64>, ws: &BoundWorkspace, w: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, &wj) in w.iter().enumerate() {
        out.rows_mut(ws.offsets[j], ws.sizes[j]).scale_mut(wj);
    }
    out
}

/// Relative slack on the Nyström diagonal before a factor is distrusted.
const NYSTROM_SLACK: f64 = 1e-8;

/// Factor of `K_mm` and whitened cross-covariance `B = K_xm L⁻ᵀ`.
///
/// Each row of `B Bᵀ` is a Nyström approximation and cannot exceed the prior
/// variance. When `K_mm` is ill-conditioned for these inputs the solves break
/// that, even though the factor itself passed, and the result inflates the
/// bound. Such a factor is rejected and the next jitter level is tried.
pub(crate) fn whitened_cross(
    fixed: &SeKernelParams,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    policy: &JitterPolicy,
) -> Result<(CholFactor, DMatrix<f64>)> {
    let kmm = se_cov(fixed, z, z)?;
    let lam = se_cov(fixed, x, z)?;
    let cap = fixed.signal_variance() * (1.0 + NYSTROM_SLACK);
    let mut err = None;
    for (i, &level) in policy.schedule.iter().enumerate() {
        let kf = match chol(
            &kmm,
            &JitterPolicy {
                schedule: vec![level],
            },
        ) {
            Ok(kf) => kf,
            Err(e) => {
                err = Some(e);
                continue;
            }
        };
        let bw = kf.solve_lower(&lam.transpose()).transpose();
        let last = i + 1 == policy.schedule.len();
        if last || bw.row_iter().all(|r| r.norm_squared() <= cap) {
            return Ok((kf, bw));
        }
    }
    Err(err
        .unwrap_or(Error::NotPositiveDefinite {
            max_jitter: 0.0,
            context: String::new(),
        })
        .with_context("K_mm"))
}

/// `log N(y | 0, Λ K⁻¹ Λᵀ + blockdiag(K̂_j / w_j))` and the trace penalty
/// `−½ Σ_j r_j Tr[(K_jj − Q_jj) K̂_jj⁻¹]` for one center, with adjoints.
///
/// Works in whitened coordinates `B = Λ L⁻ᵀ` (`K = L Lᵀ`), so that
/// `Q = B Bᵀ` and the inner matrix is `I + Bᵀ W K̂⁻¹ B`.
pub(crate) fn center_eval(
    ws: &BoundWorkspace,
    caches: &[TaskCache],
    fixed: &SeKernelParams,
    z: &DMatrix<f64>,
    cw: &CenterWeights,
    include_trace: bool,
    want_grad: bool,
) -> Result<CenterOutput> {
    let n = ws.n_total();
    let m = z.nrows();
    let d = z.ncols();
    let (kf, bw) = whitened_cross(fixed, z, &ws.x_all, &ws.policy)?;

    let mut vb = DMatrix::zeros(n, m);
    for (j, tc) in caches.iter().enumerate() {
        let (o, nj) = (ws.offsets[j], ws.sizes[j]);
        vb.rows_mut(o, nj)
            .gemm(1.0, &tc.khat_inv, &bw.rows(o, nj), 0.0);
    }
    let wvb = row_scale(&vb, ws, cw.w);
    let mut inner = bw.tr_mul(&wvb);
    for i in 0..m {
        inner[(i, i)] += 1.0;
    }
    let af = chol(&symmetrize(&inner), &ws.policy).map_err(|e| e.with_context("Φ"))?;
    let b = wvb.tr_mul(&ws.y_all);
    let a = af.solve_vec(&b);
    let mut c = 0.0;
    let mut logdet = af.logdet();
    for (j, tc) in caches.iter().enumerate() {
        let wj = cw.w[j];
        c += wj * tc.y_khat_y;
        logdet += tc.khat.logdet() - ws.sizes[j] as f64 * wj.ln();
    }
    let quad = c - b.dot(&a);
    let logpr = -0.5 * (n as f64 * LN_2PI + logdet + quad);

    let mut trace = 0.0;
    let mut kjj = Vec::new();
    if include_trace {
        for (j, tc) in caches.iter().enumerate() {
            let (o, nj) = (ws.offsets[j], ws.sizes[j]);
            let xj = ws.x_all.rows(o, nj).into_owned();
            let kj = se_cov(fixed, &xj, &xj)?;
            let tr_kk = frobenius_dot(&tc.khat_inv, &kj);
            let tr_q = bw.rows(o, nj).dot(&vb.rows(o, nj));
            trace += -0.5 * cw.r[j] * (tr_kk - tr_q);
            kjj.push(kj);
        }
    }

    if !want_grad {
        return Ok(CenterOutput {
            logpr,
            trace,
            grad: None,
        });
    }

    let ainv = af.inverse();
    let va = &vb * &a;
    let mut alpha = DVector::zeros(n);
    for (j, tc) in caches.iter().enumerate() {
        let o = ws.offsets[j];
        for i in 0..ws.sizes[j] {
            alpha[o + i] = cw.w[j] * (tc.u[i] - va[o + i]);
        }
    }
    let wvb_ainv = &wvb * &ainv;
    // G_Λ = M L⁻¹, G_K = L⁻ᵀ C L⁻¹ with M, C in whitened coordinates
    let mut gm = &alpha * a.transpose() - &wvb_ainv;
    let mut gc = DMatrix::identity(m, m) - &ainv - &a * a.transpose();
    let mut dkhat = Vec::with_capacity(caches.len());
    for (j, tc) in caches.iter().enumerate() {
        let (o, nj) = (ws.offsets[j], ws.sizes[j]);
        let wj = cw.w[j];
        let al = alpha.rows(o, nj);
        let mut g = (&al * al.transpose()) / (2.0 * wj) - &tc.khat_inv * 0.5;
        g += (vb.rows(o, nj) * wvb_ainv.rows(o, nj).transpose()) * 0.5;
        dkhat.push(g);
    }
    let mut fixed_grad = vec![0.0; 1 + d];
    if include_trace {
        let rvb = row_scale(&vb, ws, cw.r);
        gm += &rvb;
        gc -= bw.tr_mul(&rvb);
        for (j, tc) in caches.iter().enumerate() {
            let (o, nj) = (ws.offsets[j], ws.sizes[j]);
            let rj = cw.r[j];
            let t1 = &tc.khat_inv * &kjj[j] * &tc.khat_inv;
            let t2 = vb.rows(o, nj) * vb.rows(o, nj).transpose();
            dkhat[j] += (t1 - t2) * (0.5 * rj);
            // K_jj enters only through the trace: G_Kjj = −½ r_j K̂⁻¹
            fixed_grad[0] += -0.5 * rj * frobenius_dot(&tc.khat_inv, &kjj[j]);
            let xj = ws.x_all.rows(o, nj);
            for r in 0..d {
                let inv_l2 = (-2.0 * fixed.log_lengthscale[r]).exp();
                let mut acc = 0.0;
                for q in 0..nj {
                    for p in 0..nj {
                        let diff = xj[(p, r)] - xj[(q, r)];
                        acc += tc.khat_inv[(p, q)] * kjj[j][(p, q)] * diff * diff;
                    }
                }
                fixed_grad[1 + r] += -0.5 * rj * acc * inv_l2;
            }
        }
    }
    let kmm = se_cov(fixed, z, z)?;
    let lam = se_cov(fixed, &ws.x_all, z)?;
    let g_lam = kf.solve_upper(&gm.transpose()).transpose();
    let half = kf.solve_upper(&(symmetrize(&gc) * 0.5));
    let g_k = symmetrize(&kf.solve_upper(&half.transpose()).transpose());

    fixed_grad[0] += frobenius_dot(&g_lam, &lam) + frobenius_dot(&g_k, &kmm);
    let mut inducing = DMatrix::zeros(m, d);
    for r in 0..d {
        let inv_l2 = (-2.0 * fixed.log_lengthscale[r]).exp();
        let mut acc_l = 0.0;
        for i in 0..m {
            let zi = z[(i, r)];
            let mut acc_z = 0.0;
            for p in 0..n {
                let diff = ws.x_all[(p, r)] - zi;
                let t = g_lam[(p, i)] * lam[(p, i)];
                acc_z += t * diff;
                acc_l += t * diff * diff;
            }
            for q in 0..m {
                let diff = z[(q, r)] - zi;
                let t = g_k[(i, q)] * kmm[(i, q)];
                acc_z += 2.0 * t * diff;
                acc_l += t * diff * diff;
            }
            inducing[(i, r)] = acc_z * inv_l2;
        }
        fixed_grad[1 + r] += acc_l * inv_l2;
    }

    Ok(CenterOutput {
        logpr,
        trace,
        grad: Some(CenterGrad {
            fixed: fixed_grad,
            inducing,
            dkhat,
        }),
    })
}

/// Which terms of the bound enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// The full variational bound.
    Full,
    /// The bound without the trace penalty (projected-process objective).
    NoTrace,
}

/// `Σ_k log Pr(y̆|k) + (K−1)/2 Σ_j log|K̂_jj| [− ½ Σ_k Σ_j r_jk Tr(...)]`
/// and optionally its gradient over [`ModelParams::all_coords`].
///
/// `r` is `M × K`; with `K = 1` and `r ≡ 1` this is the single-center bound.
pub(crate) fn evaluate(
    ws: &mut BoundWorkspace,
    tasks: &[Task],
    params: &ModelParams,
    r: &DMatrix<f64>,
    kind: ObjectiveKind,
    want_grad: bool,
) -> Result<(f64, Option<Gradient>)> {
    let kc = params.n_centers();
    if r.nrows() != tasks.len() || r.ncols() != kc {
        return Err(Error::DimensionMismatch(format!(
            "responsibilities are {}x{}, expected {}x{}",
            r.nrows(),
            r.ncols(),
            tasks.len(),
            kc
        )));
    }
    let include_trace = kind == ObjectiveKind::Full;
    let caches = ws.caches(tasks, &params.hyper)?.to_vec();
    let ws = &*ws;
    let mut value = 0.5 * (kc as f64 - 1.0) * caches.iter().map(|c| c.khat.logdet()).sum::<f64>();
    let mut outs = Vec::with_capacity(kc);
    for k in 0..kc {
        let rk: Vec<f64> = r.column(k).iter().copied().collect();
        let wk: Vec<f64> = rk.iter().map(|v| v.max(R_FLOOR)).collect();
        let out = center_eval(
            ws,
            &caches,
            params.hyper.fixed_for(k),
            params.inducing[k].z(),
            &CenterWeights { w: &wk, r: &rk },
            include_trace,
            want_grad,
        )
        .map_err(|e| e.with_context(format!("center {k}")))?;
        value += out.logpr + out.trace;
        outs.push(out);
    }
    if !want_grad {
        return Ok((value, None));
    }

    let coords = params.all_coords();
    let mut values = vec![0.0; coords.len()];
    let index = |c: Coord| {
        coords
            .iter()
            .position(|x| *x == c)
            .expect("coordinate listed")
    };
    let d = params.hyper.random.dim();
    let mut dkhat_total: Vec<DMatrix<f64>> = caches
        .iter()
        .map(|c| &c.khat_inv * (0.5 * (kc as f64 - 1.0)))
        .collect();
    for (k, out) in outs.iter().enumerate() {
        let g = out.grad.as_ref().expect("gradient requested");
        let kern = params.hyper.kernel_index(k);
        for (p, gv) in g.fixed.iter().enumerate() {
            let param = if p == 0 {
                KernelParam::LogSignalVariance
            } else {
                KernelParam::LogLengthscale(p - 1)
            };
            values[index(Coord::Fixed {
                kernel: kern,
                param,
            })] += gv;
        }
        for row in 0..g.inducing.nrows() {
            for dim in 0..d {
                values[index(Coord::Inducing {
                    center: k,
                    row,
                    dim,
                })] += g.inducing[(row, dim)];
            }
        }
        for (j, dk) in g.dkhat.iter().enumerate() {
            dkhat_total[j] += dk;
        }
    }
    // random-effect kernel and noise enter only through K̂_jj
    let rand_params = params.hyper.random.params();
    let mut rand_grad = vec![0.0; rand_params.len()];
    let mut noise_grad = 0.0;
    for (j, tc) in caches.iter().enumerate() {
        let g = &dkhat_total[j];
        rand_grad[0] += frobenius_dot(g, &tc.krand);
        let xj = ws.task_x(j);
        for r in 0..d {
            let inv_l2 = (-2.0 * params.hyper.random.log_lengthscale[r]).exp();
            let mut acc = 0.0;
            for q in 0..xj.nrows() {
                for p in 0..xj.nrows() {
                    let diff = xj[(p, r)] - xj[(q, r)];
                    acc += g[(p, q)] * tc.krand[(p, q)] * diff * diff;
                }
            }
            rand_grad[1 + r] += acc * inv_l2;
        }
        if tc.shared_noise {
            noise_grad += tc.noise * g.trace();
        }
    }
    for (p, gv) in rand_params.iter().zip(rand_grad) {
        values[index(Coord::Random(*p))] = gv;
    }
    values[index(Coord::Noise)] = noise_grad;
    Ok((value, Some(Gradient { coords, values })))
}

fn single_center(inducing: &InducingSet, hyper: &Hyperparams) -> Result<ModelParams> {
    if hyper.fixed.len() != 1 {
        return Err(Error::InvalidInput(
            "single-center model takes one fixed kernel".into(),
        ));
    }
    ModelParams::new(hyper.clone(), vec![inducing.clone()])
}

/// The variational lower bound `F_V(X_m, θ, θ̃)`.
pub fn bound_value(tasks: &[Task], inducing: &InducingSet, hyper: &Hyperparams) -> Result<f64> {
    let params = single_center(inducing, hyper)?;
    let mut ws = BoundWorkspace::new(tasks)?;
    let r = DMatrix::from_element(tasks.len(), 1, 1.0);
    Ok(evaluate(&mut ws, tasks, &params, &r, ObjectiveKind::Full, false)?.0)
}

/// Gradient of [`bound_value`] over every hyperparameter (log space) and
/// inducing coordinate.
pub fn bound_grad(tasks: &[Task], inducing: &InducingSet, hyper: &Hyperparams) -> Result<Gradient> {
    let params = single_center(inducing, hyper)?;
    let mut ws = BoundWorkspace::new(tasks)?;
    let r = DMatrix::from_element(tasks.len(), 1, 1.0);
    Ok(
        evaluate(&mut ws, tasks, &params, &r, ObjectiveKind::Full, true)?
            .1
            .expect("gradient requested"),
    )
}

/// Responsibility-weighted optimal posterior over one center's inducing
/// values: `μ = K Φ⁻¹ Σ_j r_j K_mj K̂_jj⁻¹ y_j`, `A = K Φ⁻¹ K` with
/// `Φ = K + Σ_j r_j K_mj K̂_jj⁻¹ K_jm`.
pub(crate) fn weighted_posterior(
    ws: &BoundWorkspace,
    caches: &[TaskCache],
    fixed: &SeKernelParams,
    z: &DMatrix<f64>,
    r: &[f64],
) -> Result<InducingPosterior> {
    let m = z.nrows();
    let (kf, bw) = whitened_cross(fixed, z, &ws.x_all, &ws.policy)?;
    // whitened: Φ = L (I + Σ r_j B_jᵀ K̂⁻¹ B_j) Lᵀ
    let mut inner = DMatrix::identity(m, m);
    let mut rhs = DVector::zeros(m);
    for (j, tc) in caches.iter().enumerate() {
        if r[j] == 0.0 {
            continue;
        }
        let bj = bw.rows(ws.offsets[j], ws.sizes[j]);
        inner += bj.tr_mul(&(&tc.khat_inv * &bj)) * r[j];
        rhs += bj.tr_mul(&tc.u) * r[j];
    }
    let af = chol(&symmetrize(&inner), &ws.policy).map_err(|e| e.with_context("Φ"))?;
    let mean_w = af.solve_vec(&rhs);
    let mean = kf.l() * &mean_w;
    let x = af.solve_lower(&kf.l().transpose());
    let cov = symmetrize(&x.tr_mul(&x));
    let whitened = WhitenedPosterior {
        z: z.clone(),
        kernel: fixed.clone(),
        mean: mean_w,
        cov: symmetrize(&af.inverse()),
        jitter: kf.jitter(),
    };
    Ok(InducingPosterior {
        mean,
        cov,
        whitened: Some(whitened),
    })
}

/// Optimal variational distribution `φ*(f_m)`.
pub fn inducing_posterior(
    tasks: &[Task],
    inducing: &InducingSet,
    hyper: &Hyperparams,
) -> Result<InducingPosterior> {
    single_center(inducing, hyper)?;
    let mut ws = BoundWorkspace::new(tasks)?;
    let caches = ws.caches(tasks, hyper)?.to_vec();
    let r = vec![1.0; tasks.len()];
    weighted_posterior(&ws, &caches, &hyper.fixed[0], inducing.z(), &r)
}

/// Prediction machinery for one center with a fixed posterior.
#[derive(Clone, Debug)]
pub struct CenterPredictor<'a> {
    fixed: &'a SeKernelParams,
    random: &'a SeKernelParams,
    z: &'a DMatrix<f64>,
    kf: CholFactor,
    /// `L⁻¹ μ`
    mean_w: DVector<f64>,
    /// `L⁻¹ A L⁻ᵀ`
    cov_w: DMatrix<f64>,
    policy: JitterPolicy,
}

impl<'a> CenterPredictor<'a> {
    pub fn new(
        fixed: &'a SeKernelParams,
        random: &'a SeKernelParams,
        z: &'a DMatrix<f64>,
        post: &InducingPosterior,
    ) -> Result<Self> {
        let policy = JitterPolicy::default();
        let kf = post.kmm_factor(fixed, z)?;
        let (mean_w, cov_w) = post.whitened(fixed, z, &kf);
        Ok(CenterPredictor {
            fixed,
            random,
            z,
            kf,
            mean_w,
            cov_w,
            policy,
        })
    }

    fn whiten(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self
            .kf
            .solve_lower(&se_cov(self.fixed, x, self.z)?.transpose())
            .transpose())
    }

    /// Mean and covariance of the fixed effect at `x` under the posterior.
    pub fn fixed_effect(&self, x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let bx = self.whiten(x)?;
        let mean = &bx * &self.mean_w;
        let kxx = se_cov(self.fixed, x, x)?;
        let cov = kxx - &bx * bx.transpose() + &bx * &self.cov_w * bx.transpose();
        Ok((mean, symmetrize(&cov)))
    }

    /// Latent predictive of `f̄(x*) + f̃^j(x*)` for a task with data
    /// `(x_j, y_j)` and noise `σ_j²`.
    pub fn predict(
        &self,
        xj: &DMatrix<f64>,
        yj: &DVector<f64>,
        noise: f64,
        x_star: &DMatrix<f64>,
    ) -> Result<PredictiveDistribution> {
        let ns = x_star.nrows();
        let nj = xj.nrows();
        // H = B_* L⁻¹ and G = B_j L⁻¹ in whitened form
        let bs = self.whiten(x_star)?;
        let bj = self.whiten(xj)?;
        let mean_f = &bs * &self.mean_w;
        let bs_s = &bs * &self.cov_w;
        let kss_f = self.fixed.signal_variance();
        let kss_r = self.random.signal_variance();

        let mut khat = se_cov(self.random, xj, xj)?;
        for i in 0..nj {
            khat[(i, i)] += noise;
        }
        let kt = chol(&khat, &self.policy)?;
        let kst = se_cov(self.random, x_star, xj)?;
        // F = K̃_*j K̂_j⁻¹
        let f = kt.solve(&kst.transpose()).transpose();
        let kjj = se_cov(self.fixed, xj, xj)?;
        let bmat = &kjj - &bj * bj.transpose() + &bj * &self.cov_w * bj.transpose();
        let resid = yj - &bj * &self.mean_w;
        let mean_r = &f * resid;
        let fb = &f * &bmat;
        // Cov[f̄*, f̃*] = −H A Gᵀ Fᵀ
        let hag = &bs_s * bj.transpose();
        let mut mean = vec![0.0; ns];
        let mut var = vec![0.0; ns];
        for i in 0..ns {
            let var_f = kss_f - bs.row(i).dot(&bs.row(i)) + bs_s.row(i).dot(&bs.row(i));
            let var_r = kss_r - f.row(i).dot(&kst.row(i)) + fb.row(i).dot(&f.row(i));
            let cov = -hag.row(i).dot(&f.row(i));
            mean[i] = mean_f[i] + mean_r[i];
            var[i] = var_f + var_r + 2.0 * cov;
            if !(var[i] > 0.0) {
                return Err(Error::NonPositiveVariance(i));
            }
        }
        Ok(PredictiveDistribution { mean, var })
    }
}

/// A fitted single-center model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseModel {
    pub tasks: Vec<Task>,
    pub inducing: InducingSet,
    pub hyper: Hyperparams,
    pub posterior: InducingPosterior,
}

impl SparseModel {
    /// Computes the optimal posterior for the given parameters.
    pub fn new(tasks: Vec<Task>, inducing: InducingSet, hyper: Hyperparams) -> Result<Self> {
        let posterior = inducing_posterior(&tasks, &inducing, &hyper)?;
        Ok(SparseModel {
            tasks,
            inducing,
            hyper,
            posterior,
        })
    }
}

/// Sparse predictive distribution of `f^j(x*)` for training task `task_id`.
pub fn predict_task(
    task_id: usize,
    x_star: &DMatrix<f64>,
    state: &SparseModel,
) -> Result<PredictiveDistribution> {
    let task = state
        .tasks
        .get(task_id)
        .ok_or(Error::UnknownTask(task_id))?;
    let pred = CenterPredictor::new(
        &state.hyper.fixed[0],
        &state.hyper.random,
        state.inducing.z(),
        &state.posterior,
    )?;
    let (noise, _) = state.hyper.task_noise(task);
    pred.predict(task.x(), task.y(), noise, x_star)
}
