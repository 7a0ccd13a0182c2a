//! Grouped mixed-effect GP: variational EM over task-to-center assignments,
//! mixing weights and per-center inducing posteriors, with hyperparameters
//! and inducing locations learned by stochastic coordinate ascent.

use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{se_cov, NoiseParams, SeKernelParams};
use crate::linalg::{chol, frobenius_dot, CholFactor, JitterPolicy};
use crate::optim::{AscentConfig, CoordinateAscent, Objective};
use crate::sparse_core::{
    distinct_inputs, evaluate, weighted_posterior, BoundWorkspace, CenterPredictor, Coord,
    Gradient, Hyperparams, InducingPosterior, InducingSet, ModelParams, ObjectiveKind,
    PredictiveDistribution, Task,
};
use crate::special::{digamma, ln_gamma, logsumexp};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Responsibilities below this on every task mark a center as empty.
pub const EMPTY_CENTER: f64 = 1e-12;

pub const MODEL_SCHEMA: &str = "megp-model";
pub const MODEL_VERSION: u32 = 1;

/// The fitting method a model was produced by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Variational bound with learned inducing locations.
    #[serde(rename = "MT-VAR")]
    MtVar,
    /// Exact inference.
    #[serde(rename = "Direct")]
    Direct,
    /// Frozen random subset of the inputs as inducing set.
    #[serde(rename = "MT-SD")]
    MtSd,
    /// Bound without the trace penalty.
    #[serde(rename = "MT-PP")]
    MtPp,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::MtVar => "MT-VAR",
            Method::Direct => "Direct",
            Method::MtSd => "MT-SD",
            Method::MtPp => "MT-PP",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mt-var" | "mtvar" | "var" => Ok(Method::MtVar),
            "direct" => Ok(Method::Direct),
            "mt-sd" | "mtsd" | "sd" => Ok(Method::MtSd),
            "mt-pp" | "mtpp" | "pp" => Ok(Method::MtPp),
            _ => Err(Error::InvalidInput(format!("unknown method {s:?}"))),
        }
    }
}

/// How inducing locations are initialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducingInit {
    /// Equally spaced over the input range for 1-d inputs, a random subset
    /// of the distinct inputs otherwise.
    EquallySpaced,
    /// Independent uniform random subset of the distinct inputs per center.
    RandomSubset,
    /// Every distinct training input.
    AllInputs,
    /// Explicit locations, one matrix per center (a single entry is shared).
    Given(Vec<DMatrix<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupedModelConfig {
    /// Number of centers.
    pub k: usize,
    /// Inducing points per center; a single entry applies to every center.
    pub m: Vec<usize>,
    /// Dirichlet concentration; `1/K` when absent.
    pub alpha0: Option<f64>,
    pub em_cap: usize,
    pub mstep_cap: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Cap on the inner (r, α, φ) sweeps of each E-step.
    pub estep_cap: usize,
    /// Relative bound change below which EM stops.
    pub tol: f64,
    /// One fixed-effect kernel per center instead of a shared one.
    pub per_center_kernels: bool,
    pub objective: ObjectiveKind,
    pub inducing_init: InducingInit,
    pub learn_inducing: bool,
    pub optimize_hyper: bool,
    /// Tasks used by the single-center warm start (0 disables it).
    pub warm_start_tasks: usize,
    pub warm_start_iters: usize,
    /// Starting hyperparameters; data-driven when absent.
    pub init: Option<Hyperparams>,
    pub ascent: AscentConfig,
}

impl Default for GroupedModelConfig {
    fn default() -> Self {
        GroupedModelConfig {
            k: 1,
            m: vec![20],
            alpha0: None,
            em_cap: 30,
            mstep_cap: 50,
            restarts: 5,
            seed: 0,
            estep_cap: 10,
            tol: 1e-7,
            per_center_kernels: false,
            objective: ObjectiveKind::Full,
            inducing_init: InducingInit::EquallySpaced,
            learn_inducing: true,
            optimize_hyper: true,
            warm_start_tasks: 100,
            warm_start_iters: 150,
            init: None,
            ascent: AscentConfig::default(),
        }
    }
}

impl GroupedModelConfig {
    pub fn alpha0(&self) -> f64 {
        self.alpha0.unwrap_or(1.0 / self.k as f64)
    }

    pub fn m_for(&self, center: usize) -> usize {
        if self.m.len() == 1 {
            self.m[0]
        } else {
            self.m[center]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if self.m.is_empty() || self.m.contains(&0) || (self.m.len() != 1 && self.m.len() != self.k)
        {
            return bad("m needs one positive entry or one per center");
        }
        if !(self.alpha0() > 0.0) {
            return bad("alpha0 must be positive");
        }
        if let InducingInit::Given(zs) = &self.inducing_init {
            if zs.len() != 1 && zs.len() != self.k {
                return bad("given inducing locations need one entry or one per center");
            }
        }
        if self.em_cap == 0 || self.mstep_cap == 0 || self.restarts == 0 || self.estep_cap == 0 {
            return bad("iteration caps and restarts must be at least 1");
        }
        Ok(())
    }
}

/// `M × K` matrix of assignment probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities(DMatrix<f64>);

impl Responsibilities {
    pub fn new(r: DMatrix<f64>) -> Result<Self> {
        for j in 0..r.nrows() {
            let row = r.row(j);
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (row.sum() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "responsibility row {j} is not a distribution"
                )));
            }
        }
        Ok(Responsibilities(r))
    }

    pub fn uniform(m: usize, k: usize) -> Self {
        Responsibilities(DMatrix::from_element(m, k, 1.0 / k as f64))
    }

    pub fn one_hot(labels: &[usize], k: usize) -> Result<Self> {
        let mut r = DMatrix::zeros(labels.len(), k);
        for (j, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::InvalidInput(format!("label {l} out of range")));
            }
            r[(j, l)] = 1.0;
        }
        Ok(Responsibilities(r))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n_tasks(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_centers(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        self.0.row(j).iter().copied().collect()
    }
}

/// Posterior Dirichlet over mixing weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletPosterior {
    pub alpha: Vec<f64>,
}

impl DirichletPosterior {
    /// `E[log π_k] = ψ(α_k) − ψ(Σα)`
    pub fn expected_log_pi(&self) -> Vec<f64> {
        let total = digamma(self.alpha.iter().sum());
        self.alpha.iter().map(|a| digamma(*a) - total).collect()
    }
}

/// One center: inducing set, fixed-effect kernel and posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterState {
    pub inducing: InducingSet,
    pub kernel: SeKernelParams,
    pub posterior: InducingPosterior,
}

/// `α_k = α₀ + Σ_{j=1..M} r_jk`
pub fn estep_dirichlet(r: &Responsibilities, alpha0: f64) -> DirichletPosterior {
    let alpha = (0..r.n_centers())
        .map(|k| alpha0 + r.0.column(k).sum())
        .collect();
    DirichletPosterior { alpha }
}

/// Optimal Gaussian over center `k`'s inducing values given the
/// responsibilities. Returns the prior and `true` for an empty center.
pub fn estep_center_posterior(
    tasks: &[Task],
    r: &Responsibilities,
    k: usize,
    params: &ModelParams,
) -> Result<(InducingPosterior, bool)> {
    let mut ws = BoundWorkspace::new(tasks)?;
    center_posterior(&mut ws, tasks, r, k, params)
}

fn center_posterior(
    ws: &mut BoundWorkspace,
    tasks: &[Task],
    r: &Responsibilities,
    k: usize,
    params: &ModelParams,
) -> Result<(InducingPosterior, bool)> {
    let rk: Vec<f64> = r.0.column(k).iter().copied().collect();
    let fixed = params.hyper.fixed_for(k);
    let z = params.inducing[k].z();
    if rk.iter().all(|v| *v < EMPTY_CENTER) {
        let cov = se_cov(fixed, z, z)?;
        return Ok((InducingPosterior::new(DVector::zeros(z.nrows()), cov), true));
    }
    let caches = ws.caches(tasks, &params.hyper)?.to_vec();
    weighted_posterior(ws, &caches, fixed, z, &rk)
        .map_err(|e| e.with_context(format!("center {k}")))
        .map(|p| (p, false))
}

/// Whitened view of one center used by the E-step.
struct CenterView {
    kf: CholFactor,
    mean_w: DVector<f64>,
    cov_w: DMatrix<f64>,
    kl: f64,
}

fn center_view(
    fixed: &SeKernelParams,
    z: &DMatrix<f64>,
    post: &InducingPosterior,
) -> Result<CenterView> {
    let m = z.nrows();
    let kf = post.kmm_factor(fixed, z)?;
    let (mean_w, cov_w) = post.whitened(fixed, z, &kf);
    let sf = chol(&cov_w, &JitterPolicy::default())
        .map_err(|e| e.with_context("posterior covariance"))?;
    let kl = 0.5 * (cov_w.trace() + mean_w.norm_squared() - m as f64 - sf.logdet());
    Ok(CenterView {
        kf,
        mean_w,
        cov_w,
        kl,
    })
}

/// `E_φ[log G(η_k, y^j)]` for every task and center (`M × K`).
pub fn expected_log_g(
    tasks: &[Task],
    params: &ModelParams,
    posteriors: &[InducingPosterior],
) -> Result<DMatrix<f64>> {
    let mut ws = BoundWorkspace::new(tasks)?;
    Ok(expected_log_g_ws(&mut ws, tasks, params, posteriors)?.0)
}

fn expected_log_g_ws(
    ws: &mut BoundWorkspace,
    tasks: &[Task],
    params: &ModelParams,
    posteriors: &[InducingPosterior],
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let kc = params.n_centers();
    let caches = ws.caches(tasks, &params.hyper)?.to_vec();
    let mut out = DMatrix::zeros(tasks.len(), kc);
    let mut kls = Vec::with_capacity(kc);
    for k in 0..kc {
        let fixed = params.hyper.fixed_for(k);
        let z = params.inducing[k].z();
        let view = center_view(fixed, z, &posteriors[k])
            .map_err(|e| e.with_context(format!("center {k}")))?;
        let m = z.nrows();
        let s_minus_i = &view.cov_w - DMatrix::<f64>::identity(m, m);
        for (j, (t, tc)) in tasks.iter().zip(&caches).enumerate() {
            let bj = view
                .kf
                .solve_lower(&se_cov(fixed, t.x(), z)?.transpose())
                .transpose();
            let resid = t.y() - &bj * &view.mean_w;
            let quad = resid.dot(&(&tc.khat_inv * &resid));
            let loglik = -0.5 * (t.len() as f64 * LN_2PI + tc.khat.logdet() + quad);
            let vb = &tc.khat_inv * &bj;
            let corr = frobenius_dot(&vb, &(&bj * &s_minus_i));
            let kjj = se_cov(fixed, t.x(), t.x())?;
            let tr_kk = frobenius_dot(&tc.khat_inv, &kjj);
            out[(j, k)] = loglik - 0.5 * corr - 0.5 * tr_kk;
        }
        kls.push(view.kl);
    }
    Ok((out, kls))
}

fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut r = logits.clone();
    for j in 0..r.nrows() {
        let row: Vec<f64> = logits.row(j).iter().copied().collect();
        let lse = logsumexp(&row);
        for k in 0..r.ncols() {
            r[(j, k)] = (row[k] - lse).exp();
        }
        let s: f64 = r.row(j).sum();
        for k in 0..r.ncols() {
            r[(j, k)] /= s;
        }
    }
    r
}

/// `r_jk ∝ exp(ψ(α_k) − ψ(Σα) + E_φ[log G_jk])`, normalized in log space.
pub fn estep_responsibilities(
    tasks: &[Task],
    params: &ModelParams,
    posteriors: &[InducingPosterior],
    dir: &DirichletPosterior,
) -> Result<Responsibilities> {
    let elg = expected_log_g(tasks, params, posteriors)?;
    Ok(Responsibilities(responsibilities_from(&elg, dir)))
}

fn responsibilities_from(elg: &DMatrix<f64>, dir: &DirichletPosterior) -> DMatrix<f64> {
    let elp = dir.expected_log_pi();
    let logits = DMatrix::from_fn(elg.nrows(), elg.ncols(), |j, k| elg[(j, k)] + elp[k]);
    softmax_rows(&logits)
}

/// Full variational objective `L(q(Z), q(π), φ)` at fixed hyperparameters.
pub fn elbo(
    tasks: &[Task],
    params: &ModelParams,
    r: &Responsibilities,
    dir: &DirichletPosterior,
    posteriors: &[InducingPosterior],
    alpha0: f64,
) -> Result<f64> {
    let mut ws = BoundWorkspace::new(tasks)?;
    elbo_ws(&mut ws, tasks, params, r, dir, posteriors, alpha0)
}

fn elbo_ws(
    ws: &mut BoundWorkspace,
    tasks: &[Task],
    params: &ModelParams,
    r: &Responsibilities,
    dir: &DirichletPosterior,
    posteriors: &[InducingPosterior],
    alpha0: f64,
) -> Result<f64> {
    let (elg, kls) = expected_log_g_ws(ws, tasks, params, posteriors)?;
    let kc = params.n_centers() as f64;
    let elp = dir.expected_log_pi();
    let r = &r.0;
    let mut total = 0.0;
    for j in 0..r.nrows() {
        for k in 0..r.ncols() {
            let rjk = r[(j, k)];
            if rjk > 0.0 {
                total += rjk * (elg[(j, k)] + elp[k] - rjk.ln());
            }
        }
    }
    total -= kls.iter().sum::<f64>();
    // E[log p(π)] − E[log q(π)]
    total += ln_gamma(kc * alpha0) - kc * ln_gamma(alpha0);
    total += elp.iter().map(|e| (alpha0 - 1.0) * e).sum::<f64>();
    let asum: f64 = dir.alpha.iter().sum();
    total -= ln_gamma(asum) - dir.alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>();
    total -= dir
        .alpha
        .iter()
        .zip(&elp)
        .map(|(a, e)| (a - 1.0) * e)
        .sum::<f64>();
    Ok(total)
}

/// M-step objective over hyperparameters and inducing locations.
pub struct MStepObjective<'a> {
    pub tasks: &'a [Task],
    pub r: &'a DMatrix<f64>,
    pub kind: ObjectiveKind,
    pub ws: BoundWorkspace,
}

impl<'a> MStepObjective<'a> {
    pub fn new(tasks: &'a [Task], r: &'a DMatrix<f64>, kind: ObjectiveKind) -> Result<Self> {
        Ok(MStepObjective {
            tasks,
            r,
            kind,
            ws: BoundWorkspace::new(tasks)?,
        })
    }
}

impl Objective for MStepObjective<'_> {
    fn value(&mut self, params: &ModelParams) -> Result<f64> {
        Ok(evaluate(&mut self.ws, self.tasks, params, self.r, self.kind, false)?.0)
    }

    fn gradient(&mut self, params: &ModelParams) -> Result<Gradient> {
        Ok(
            evaluate(&mut self.ws, self.tasks, params, self.r, self.kind, true)?
                .1
                .expect("gradient requested"),
        )
    }
}

/// The grouped M-step bound.
pub fn mstep_bound(tasks: &[Task], r: &Responsibilities, params: &ModelParams) -> Result<f64> {
    MStepObjective::new(tasks, &r.0, ObjectiveKind::Full)?.value(params)
}

/// Partial derivative of [`mstep_bound`] with respect to `coord`.
pub fn mstep_grad(
    tasks: &[Task],
    r: &Responsibilities,
    params: &ModelParams,
    coord: Coord,
) -> Result<f64> {
    let g = MStepObjective::new(tasks, &r.0, ObjectiveKind::Full)?.gradient(params)?;
    g.get(coord)
        .ok_or_else(|| Error::UnknownParameter(format!("unknown coordinate {coord:?}")))
}

/// Projected-process objective: the bound without its trace penalty.
pub fn mtpp_objective(tasks: &[Task], r: &Responsibilities, params: &ModelParams) -> Result<f64> {
    MStepObjective::new(tasks, &r.0, ObjectiveKind::NoTrace)?.value(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Variational objective after the E-step.
    pub elbo: f64,
    /// M-step objective after the M-step (absent on the final E-step).
    pub mstep: Option<f64>,
}

/// A fitted grouped model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedModel {
    pub method: Method,
    pub config: GroupedModelConfig,
    pub params: ModelParams,
    pub posteriors: Vec<InducingPosterior>,
    pub responsibilities: Responsibilities,
    pub dirichlet: DirichletPosterior,
    pub tasks: Vec<Task>,
    pub trace: Vec<TraceEntry>,
    pub elbo: f64,
    pub mstep_bound: f64,
    pub restart: usize,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema: String,
    version: u32,
    model: T,
}

impl GroupedModel {
    pub fn n_centers(&self) -> usize {
        self.params.n_centers()
    }

    pub fn center(&self, k: usize) -> CenterState {
        CenterState {
            inducing: self.params.inducing[k].clone(),
            kernel: self.params.hyper.fixed_for(k).clone(),
            posterior: self.posteriors[k].clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let env = Envelope {
            schema: MODEL_SCHEMA.to_string(),
            version: MODEL_VERSION,
            model: self,
        };
        Ok(serde_json::to_string_pretty(&env)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let schema = v.get("schema").and_then(|x| x.as_str()).unwrap_or("");
        let version = v.get("version").and_then(|x| x.as_u64());
        if schema != MODEL_SCHEMA || version != Some(MODEL_VERSION as u64) {
            return Err(Error::SchemaVersion {
                found: format!("{schema} {version:?}"),
                expected: format!("{MODEL_SCHEMA} {MODEL_VERSION}"),
            });
        }
        let env: Envelope<GroupedModel> = serde_json::from_value(v)?;
        Ok(env.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Starting hyperparameters from the pooled targets and input range.
pub fn default_hyper(tasks: &[Task], k: usize, per_center: bool) -> Hyperparams {
    let ys: Vec<f64> = tasks.iter().flat_map(|t| t.y().iter().copied()).collect();
    let n = ys.len().max(1) as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let mut var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        var = 1.0;
    }
    let d = tasks.first().map_or(1, Task::dim);
    let ls: Vec<f64> = (0..d)
        .map(|r| {
            let (lo, hi) = input_range(tasks, r);
            if hi > lo {
                (hi - lo) / 10.0
            } else {
                1.0
            }
        })
        .collect();
    let fixed = SeKernelParams::new(0.6 * var, &ls);
    Hyperparams {
        fixed: vec![fixed; if per_center { k } else { 1 }],
        random: SeKernelParams::new(0.2 * var, &ls),
        noise: NoiseParams::shared(0.2 * var),
    }
}

fn input_range(tasks: &[Task], r: usize) -> (f64, f64) {
    tasks
        .iter()
        .flat_map(|t| t.x().column(r).iter().copied().collect::<Vec<_>>())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
}

/// Inducing locations for one center.
pub fn init_inducing<R: Rng>(
    tasks: &[Task],
    m: usize,
    how: &InducingInit,
    learnable: bool,
    rng: &mut R,
) -> Result<InducingSet> {
    let d = tasks.first().map_or(1, Task::dim);
    match how {
        InducingInit::EquallySpaced if d == 1 => {
            let (lo, hi) = input_range(tasks, 0);
            let z: Vec<f64> = if m == 1 || hi <= lo {
                (0..m).map(|i| 0.5 * (lo + hi) + i as f64).collect()
            } else {
                (0..m)
                    .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
                    .collect()
            };
            InducingSet::from_1d(&z, learnable)
        }
        InducingInit::AllInputs => InducingSet::all_inputs(tasks, learnable),
        InducingInit::Given(zs) => match zs.first() {
            Some(z) => InducingSet::new(z.clone(), learnable),
            None => Err(Error::InvalidInput("no inducing locations given".into())),
        },
        _ => {
            let all = distinct_inputs(tasks);
            if m > all.nrows() {
                return Err(Error::InsufficientPoints {
                    requested: m,
                    available: all.nrows(),
                });
            }
            let mut idx = sample(rng, all.nrows(), m).into_vec();
            idx.sort_unstable();
            InducingSet::new(all.select_rows(idx.iter()), learnable)
        }
    }
}

struct EmState {
    r: Responsibilities,
    dir: DirichletPosterior,
    posteriors: Vec<InducingPosterior>,
}

/// Inner coordinate-ascent sweeps `α ← r`, `φ ← r`, `r ← (α, φ)`.
fn estep(
    ws: &mut BoundWorkspace,
    tasks: &[Task],
    params: &ModelParams,
    r0: &Responsibilities,
    alpha0: f64,
    cap: usize,
    warnings: &mut Vec<String>,
) -> Result<EmState> {
    let kc = params.n_centers();
    let mut r = r0.clone();
    let mut state = None;
    for sweep in 0..cap {
        let dir = estep_dirichlet(&r, alpha0);
        let mut posteriors = Vec::with_capacity(kc);
        for k in 0..kc {
            let (p, empty) = center_posterior(ws, tasks, &r, k, params)?;
            if empty {
                let msg = format!("center {k} is empty; posterior reset to the prior");
                warn!("{msg}");
                if !warnings.contains(&msg) {
                    warnings.push(msg);
                }
            }
            posteriors.push(p);
        }
        let (elg, _) = expected_log_g_ws(ws, tasks, params, &posteriors)?;
        let next = Responsibilities(responsibilities_from(&elg, &dir));
        let change = (&next.0 - &r.0).amax();
        r = next;
        state = Some(EmState {
            r: r.clone(),
            dir,
            posteriors,
        });
        if kc == 1 || change < 1e-10 {
            debug!("E-step converged after {} sweeps", sweep + 1);
            break;
        }
    }
    Ok(state.expect("at least one sweep"))
}

fn splitmix(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hyperparameter-only coordinates.
fn hyper_coords(params: &ModelParams) -> Vec<Coord> {
    params
        .free_coords()
        .into_iter()
        .filter(|c| !matches!(c, Coord::Inducing { .. }))
        .collect()
}

/// Single-center, hyperparameter-only ascent on a task subsample.
fn warm_start<R: Rng>(
    tasks: &[Task],
    hyper: Hyperparams,
    config: &GroupedModelConfig,
    rng: &mut R,
) -> Result<Hyperparams> {
    let n = config.warm_start_tasks.min(tasks.len());
    if n == 0 || config.warm_start_iters == 0 || !config.optimize_hyper {
        return Ok(hyper);
    }
    let mut idx = sample(rng, tasks.len(), n).into_vec();
    idx.sort_unstable();
    let sub: Vec<Task> = idx.iter().map(|&i| tasks[i].clone()).collect();
    let m = config.m.iter().copied().max().unwrap_or(1);
    let z = init_inducing(
        &sub,
        m.min(distinct_inputs(&sub).nrows()),
        &config.inducing_init,
        false,
        rng,
    )?;
    let mut h = hyper;
    let shared = h.fixed[0].clone();
    h.fixed = vec![shared];
    let mut params = ModelParams::new(h, vec![z])?;
    let r = DMatrix::from_element(sub.len(), 1, 1.0);
    let mut obj = MStepObjective::new(&sub, &r, config.objective)?;
    let coords = hyper_coords(&params);
    let v0 = obj.value(&params)?;
    let mut opt = CoordinateAscent::new(config.ascent.clone());
    let v = opt.run(
        &mut obj,
        &mut params,
        &coords,
        v0,
        config.warm_start_iters,
        rng,
    )?;
    debug!("warm start on {} tasks: {v0:.4} -> {v:.4}", sub.len());
    Ok(params.hyper)
}

/// Fits the grouped model with the configured number of restarts and keeps
/// the restart with the highest final variational objective.
pub fn fit(tasks: &[Task], config: &GroupedModelConfig) -> Result<GroupedModel> {
    fit_method(tasks, config, Method::MtVar)
}

pub(crate) fn fit_method(
    tasks: &[Task],
    config: &GroupedModelConfig,
    method: Method,
) -> Result<GroupedModel> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidInput("at least one task is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let hyper0 = match &config.init {
        Some(h) => h.clone(),
        None => default_hyper(tasks, config.k, false),
    };
    let mut hyper = warm_start(tasks, hyper0, config, &mut rng)?;
    if config.per_center_kernels && hyper.fixed.len() == 1 {
        hyper.fixed = vec![hyper.fixed[0].clone(); config.k];
    }
    let mut best: Option<GroupedModel> = None;
    let mut first_err = None;
    let mut failures = 0;
    for restart in 0..config.restarts {
        let seed = splitmix(config.seed, restart as u64);
        match fit_once(tasks, config, method, hyper.clone(), seed, restart) {
            Ok(model) => {
                debug!("restart {restart}: elbo {:.6}", model.elbo);
                if best.as_ref().is_none_or(|b| model.elbo > b.elbo) {
                    best = Some(model);
                }
            }
            Err(e) => {
                warn!("restart {restart} failed: {e}");
                failures += 1;
                first_err.get_or_insert(e.to_string());
            }
        }
    }
    best.ok_or_else(|| Error::AllRestartsFailed {
        attempts: failures,
        first: first_err.unwrap_or_default(),
    })
}

fn fit_once(
    tasks: &[Task],
    config: &GroupedModelConfig,
    method: Method,
    hyper: Hyperparams,
    seed: u64,
    restart: usize,
) -> Result<GroupedModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kc = config.k;
    let inducing = (0..kc)
        .map(|k| match &config.inducing_init {
            InducingInit::Given(zs) if zs.len() > 1 => {
                InducingSet::new(zs[k].clone(), config.learn_inducing)
            }
            how => init_inducing(tasks, config.m_for(k), how, config.learn_inducing, &mut rng),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut params = ModelParams::new(hyper, inducing)?;
    let r0 = if kc == 1 {
        Responsibilities(DMatrix::from_element(tasks.len(), 1, 1.0))
    } else {
        let labels: Vec<usize> = (0..tasks.len()).map(|_| rng.random_range(0..kc)).collect();
        Responsibilities::one_hot(&labels, kc)?
    };
    let alpha0 = config.alpha0();
    let mut ws = BoundWorkspace::new(tasks)?;
    let mut opt = CoordinateAscent::new(config.ascent.clone());
    let coords = if config.optimize_hyper {
        params.free_coords()
    } else {
        Vec::new()
    };
    let mut warnings = Vec::new();
    let mut trace = Vec::new();
    let mut r = r0;
    let mut prev: Option<f64> = None;
    for it in 0..config.em_cap {
        let st = estep(
            &mut ws,
            tasks,
            &params,
            &r,
            alpha0,
            config.estep_cap,
            &mut warnings,
        )?;
        let l = elbo_ws(
            &mut ws,
            tasks,
            &params,
            &st.r,
            &st.dir,
            &st.posteriors,
            alpha0,
        )?;
        r = st.r;
        let converged = prev.is_some_and(|p| (l - p).abs() <= config.tol * p.abs().max(1e-300));
        prev = Some(l);
        if converged || coords.is_empty() {
            trace.push(TraceEntry {
                iteration: it,
                elbo: l,
                mstep: None,
            });
            break;
        }
        let mut obj = MStepObjective {
            tasks,
            r: &r.0,
            kind: config.objective,
            ws: ws.clone(),
        };
        let v0 = obj.value(&params)?;
        let v = opt.run(
            &mut obj,
            &mut params,
            &coords,
            v0,
            config.mstep_cap,
            &mut rng,
        )?;
        ws = obj.ws;
        debug!("EM {it}: elbo {l:.6}, M-step {v0:.6} -> {v:.6}");
        trace.push(TraceEntry {
            iteration: it,
            elbo: l,
            mstep: Some(v),
        });
    }
    let st = estep(
        &mut ws,
        tasks,
        &params,
        &r,
        alpha0,
        config.estep_cap,
        &mut warnings,
    )?;
    let l = elbo_ws(
        &mut ws,
        tasks,
        &params,
        &st.r,
        &st.dir,
        &st.posteriors,
        alpha0,
    )?;
    let mut obj = MStepObjective {
        tasks,
        r: &st.r.0,
        kind: config.objective,
        ws,
    };
    let mstep_bound = obj.value(&params)?;
    trace.push(TraceEntry {
        iteration: trace.len(),
        elbo: l,
        mstep: None,
    });
    Ok(GroupedModel {
        method,
        config: config.clone(),
        params,
        posteriors: st.posteriors,
        responsibilities: st.r,
        dirichlet: st.dir,
        tasks: tasks.to_vec(),
        trace,
        elbo: l,
        mstep_bound,
        restart,
        warnings,
    })
}

/// Per-center prediction machinery built once for a fitted model.
pub struct GroupedPredictor<'a> {
    model: &'a GroupedModel,
    centers: Vec<CenterPredictor<'a>>,
}

impl<'a> GroupedPredictor<'a> {
    pub fn new(model: &'a GroupedModel) -> Result<Self> {
        let centers = (0..model.n_centers())
            .map(|k| {
                CenterPredictor::new(
                    model.params.hyper.fixed_for(k),
                    &model.params.hyper.random,
                    model.params.inducing[k].z(),
                    &model.posteriors[k],
                )
                .map_err(|e| e.with_context(format!("center {k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupedPredictor { model, centers })
    }

    /// Mixture predictive for a task with data `(x, y)` and weights `r`.
    pub fn predict_with(
        &self,
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        noise: f64,
        r: &[f64],
        x_star: &DMatrix<f64>,
    ) -> Result<PredictiveDistribution> {
        let parts = r
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(k, w)| Ok((*w, self.centers[k].predict(x, y, noise, x_star)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(mixture(&parts))
    }

    pub fn predict_existing(
        &self,
        task_id: usize,
        x_star: &DMatrix<f64>,
    ) -> Result<PredictiveDistribution> {
        let t = self
            .model
            .tasks
            .get(task_id)
            .ok_or(Error::UnknownTask(task_id))?;
        let (noise, _) = self.model.params.hyper.task_noise(t);
        self.predict_with(
            t.x(),
            t.y(),
            noise,
            &self.model.responsibilities.row(task_id),
            x_star,
        )
    }
}

/// Moments of `Σ_k w_k N(μ_k, σ_k²)` by the law of total variance.
pub fn mixture(parts: &[(f64, PredictiveDistribution)]) -> PredictiveDistribution {
    let n = parts.first().map_or(0, |p| p.1.mean.len());
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    for i in 0..n {
        mean[i] = parts.iter().map(|(w, p)| w * p.mean[i]).sum::<f64>() / total;
        var[i] = parts
            .iter()
            .map(|(w, p)| w * (p.var[i] + (p.mean[i] - mean[i]).powi(2)))
            .sum::<f64>()
            / total;
    }
    PredictiveDistribution { mean, var }
}

/// `Σ_k r_jk Pr(f^j(x*) | z_jk = 1, D)` for training task `task_id`.
pub fn predict_existing(
    task_id: usize,
    x_star: &DMatrix<f64>,
    model: &GroupedModel,
) -> Result<PredictiveDistribution> {
    GroupedPredictor::new(model)?.predict_existing(task_id, x_star)
}

/// Responsibilities of a new task with every other variational factor held
/// fixed.
pub fn new_task_responsibilities(task: &Task, model: &GroupedModel) -> Result<Vec<f64>> {
    let tasks = std::slice::from_ref(task);
    let elg = expected_log_g(tasks, &model.params, &model.posteriors)?;
    Ok(responsibilities_from(&elg, &model.dirichlet)
        .row(0)
        .iter()
        .copied()
        .collect())
}

/// Prediction for a task not seen during fitting.
///
/// With `α` and `φ` held fixed the responsibility update for the new row
/// does not depend on its previous value, so one update is its fixed point.
pub fn predict_new_task(
    x_new: &DMatrix<f64>,
    y_new: &DVector<f64>,
    x_star: &DMatrix<f64>,
    model: &GroupedModel,
) -> Result<(Vec<f64>, PredictiveDistribution)> {
    let task = Task::new(x_new.clone(), y_new.clone())?;
    let r = new_task_responsibilities(&task, model)?;
    let (noise, _) = model.params.hyper.task_noise(&task);
    let pred = GroupedPredictor::new(model)?.predict_with(task.x(), task.y(), noise, &r, x_star)?;
    Ok((r, pred))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// Zero-based center index.
    pub center: usize,
    /// Another center had the same responsibility; the lowest index won.
    pub tie: bool,
}

/// MAP center of each responsibility row.
pub fn assign_rows(r: &Responsibilities) -> Vec<Assignment> {
    (0..r.n_tasks())
        .map(|j| {
            let row = r.row(j);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            let tie = row
                .iter()
                .enumerate()
                .any(|(k, v)| k != best && (v - row[best]).abs() <= 1e-12);
            Assignment { center: best, tie }
        })
        .collect()
}

pub fn map_assignments(model: &GroupedModel) -> Vec<Assignment> {
    assign_rows(&model.responsibilities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_core::{bound_grad, bound_value, inducing_posterior};

    fn toy_tasks() -> Vec<Task> {
        vec![
            Task::from_1d(&[-1.0, 0.0, 1.2], &[0.5, 1.0, 0.2]).unwrap(),
            Task::from_1d(&[-0.5, 0.4, 2.0], &[-0.3, -0.8, 0.1]).unwrap(),
            Task::from_1d(&[0.1, 1.5, -2.0], &[0.9, 0.3, 0.0]).unwrap(),
        ]
    }

    fn toy_params(k: usize) -> ModelParams {
        let h = Hyperparams::new(
            SeKernelParams::new(1.0, &[1.1]),
            SeKernelParams::new(0.3, &[0.8]),
            NoiseParams::shared(0.2),
        );
        let z = (0..k)
            .map(|c| InducingSet::from_1d(&[-1.0 + 0.1 * c as f64, 0.9], true).unwrap())
            .collect();
        ModelParams::new(h, z).unwrap()
    }

    #[test]
    fn dirichlet_examples() {
        let r = Responsibilities::one_hot(&[0; 6], 3).unwrap();
        let d = estep_dirichlet(&r, 1.0 / 3.0);
        assert!((d.alpha[0] - (6.0 + 1.0 / 3.0)).abs() < 1e-12);
        assert!((d.alpha[1] - 1.0 / 3.0).abs() < 1e-12);
        let d = estep_dirichlet(&Responsibilities::uniform(6, 3), 1.0 / 3.0);
        for a in d.alpha {
            assert!((a - 7.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_center_reductions() {
        let tasks = toy_tasks();
        let p = toy_params(1);
        let r = Responsibilities::one_hot(&[0, 0, 0], 1).unwrap();
        let a = mstep_bound(&tasks, &r, &p).unwrap();
        let b = bound_value(&tasks, &p.inducing[0], &p.hyper).unwrap();
        assert_eq!(a, b);
        let g = bound_grad(&tasks, &p.inducing[0], &p.hyper).unwrap();
        for c in p.all_coords() {
            assert_eq!(mstep_grad(&tasks, &r, &p, c).unwrap(), g.get(c).unwrap());
        }
        let (post, empty) = estep_center_posterior(&tasks, &r, 0, &p).unwrap();
        assert!(!empty);
        let want = inducing_posterior(&tasks, &p.inducing[0], &p.hyper).unwrap();
        assert_eq!(post, want);
        let d = estep_dirichlet(&r, 1.0);
        let rr = estep_responsibilities(&tasks, &p, &[post], &d).unwrap();
        assert!(rr.matrix().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn empty_center_reverts_to_prior() {
        let tasks = toy_tasks();
        let p = toy_params(2);
        let r = Responsibilities::one_hot(&[0, 0, 0], 2).unwrap();
        let (post, empty) = estep_center_posterior(&tasks, &r, 1, &p).unwrap();
        assert!(empty);
        assert_eq!(post.mean, DVector::zeros(2));
        assert_eq!(
            post.cov,
            se_cov(&p.hyper.fixed[0], p.inducing[1].z(), p.inducing[1].z()).unwrap()
        );
    }

    #[test]
    fn symmetric_centers_split_evenly() {
        let tasks = toy_tasks();
        let mut p = toy_params(2);
        p.inducing[1] = p.inducing[0].clone();
        let r = Responsibilities::uniform(3, 2);
        let post = (0..2)
            .map(|k| estep_center_posterior(&tasks, &r, k, &p).unwrap().0)
            .collect::<Vec<_>>();
        let d = estep_dirichlet(&r, 0.5);
        let rr = estep_responsibilities(&tasks, &p, &post, &d).unwrap();
        assert!(rr.matrix().iter().all(|v| (*v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn map_assignment_examples() {
        let r = Responsibilities::new(DMatrix::from_row_slice(
            2,
            3,
            &[0.2, 0.5, 0.3, 0.5, 0.5, 0.0],
        ))
        .unwrap();
        let a = assign_rows(&r);
        assert_eq!(
            a[0],
            Assignment {
                center: 1,
                tie: false
            }
        );
        assert_eq!(
            a[1],
            Assignment {
                center: 0,
                tie: true
            }
        );
    }

    #[test]
    fn elbo_at_optimal_posterior_tracks_the_mstep_bound() {
        // ELBO(φ*) − bound depends on r only, not on the hyperparameters
        let tasks = toy_tasks();
        let r = Responsibilities::new(DMatrix::from_row_slice(
            3,
            2,
            &[0.7, 0.3, 0.2, 0.8, 0.5, 0.5],
        ))
        .unwrap();
        let diff = |p: &ModelParams| {
            let post: Vec<_> = (0..2)
                .map(|k| estep_center_posterior(&tasks, &r, k, p).unwrap().0)
                .collect();
            let d = estep_dirichlet(&r, 0.5);
            elbo(&tasks, p, &r, &d, &post, 0.5).unwrap() - mstep_bound(&tasks, &r, p).unwrap()
        };
        let p1 = toy_params(2);
        let mut p2 = p1.clone();
        p2.hyper.noise = NoiseParams::shared(0.45);
        p2.hyper.fixed[0] = SeKernelParams::new(1.7, &[0.6]);
        assert!((diff(&p1) - diff(&p2)).abs() < 1e-9);
    }

    #[test]
    fn fit_is_deterministic_and_serializes() {
        let tasks = toy_tasks();
        let config = GroupedModelConfig {
            k: 2,
            m: vec![2],
            restarts: 1,
            em_cap: 3,
            mstep_cap: 5,
            warm_start_iters: 5,
            seed: 9,
            ..Default::default()
        };
        let a = fit(&tasks, &config).unwrap();
        let b = fit(&tasks, &config).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let back = GroupedModel::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        let bad = a
            .to_json()
            .unwrap()
            .replace("\"version\": 1", "\"version\": 7");
        assert!(matches!(
            GroupedModel::from_json(&bad),
            Err(Error::SchemaVersion { .. })
        ));
    }
}
