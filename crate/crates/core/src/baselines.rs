//! Comparison methods: exact (direct) inference, a frozen random subset of
//! the inputs as inducing set (MT-SD) and the bound without its trace
//! penalty (MT-PP).

use std::cell::RefCell;
use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouped::{
    default_hyper, fit_method, init_inducing, mstep_bound, GroupedModel, GroupedModelConfig,
    GroupedPredictor, InducingInit, Method, Responsibilities,
};
use crate::kernels::{mixed_effect_cov, se_cov, KernelParam, SeKernelParams};
use crate::linalg::{chol, frobenius_dot, CholFactor, JitterPolicy};
use crate::optim::{CoordinateAscent, Objective};
use crate::sparse_core::{
    Coord, Gradient, Hyperparams, InducingSet, ModelParams, ObjectiveKind, PredictiveDistribution,
    Task,
};

/// Largest total number of training points exact inference accepts
/// without an explicit override.
pub const SIZE_GUARD: usize = 5000;

pub const FIT_SCHEMA: &str = "megp-fit";
pub const FIT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    Direct,
    MtSd,
    MtPp,
}

impl BaselineKind {
    pub fn method(self) -> Method {
        match self {
            BaselineKind::Direct => Method::Direct,
            BaselineKind::MtSd => Method::MtSd,
            BaselineKind::MtPp => Method::MtPp,
        }
    }
}

fn guard(tasks: &[Task], allow_large: bool) -> Result<usize> {
    let n: usize = tasks.iter().map(Task::len).sum();
    if n > SIZE_GUARD && !allow_large {
        return Err(Error::SizeGuard {
            n,
            limit: SIZE_GUARD,
        });
    }
    Ok(n)
}

fn single_kernel(hyper: &Hyperparams) -> Result<&SeKernelParams> {
    if hyper.fixed.len() != 1 {
        return Err(Error::InvalidInput(
            "exact inference takes one fixed kernel".into(),
        ));
    }
    Ok(&hyper.fixed[0])
}

/// `K†(x̆, x̆) + diag(σ²)` factored, with `α = C⁻¹ y̆`.
struct Dense {
    chol: CholFactor,
    alpha: DVector<f64>,
    y: DVector<f64>,
}

impl Dense {
    fn new(tasks: &[Task], hyper: &Hyperparams, allow_large: bool) -> Result<Dense> {
        hyper.validate()?;
        let n = guard(tasks, allow_large)?;
        let fixed = single_kernel(hyper)?;
        let rows: Vec<(usize, &DMatrix<f64>)> =
            tasks.iter().enumerate().map(|(j, t)| (j, t.x())).collect();
        let mut c = mixed_effect_cov(fixed, &hyper.random, &rows, &rows)?;
        let mut y = DVector::zeros(n);
        let mut o = 0;
        for t in tasks {
            let (s2, _) = hyper.task_noise(t);
            for i in 0..t.len() {
                c[(o + i, o + i)] += s2;
                y[o + i] = t.y()[i];
            }
            o += t.len();
        }
        let chol =
            chol(&c, &JitterPolicy::default()).map_err(|e| e.with_context("direct covariance"))?;
        let alpha = chol.solve_vec(&y);
        Ok(Dense { chol, alpha, y })
    }

    fn loglik(&self) -> f64 {
        let n = self.y.len() as f64;
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln()
            + self.chol.logdet()
            + self.y.dot(&self.alpha))
    }
}

/// Exact log marginal likelihood `log N(y̆ | 0, K† + σ²I)` of the
/// single-center model.
pub fn direct_loglik(tasks: &[Task], hyper: &Hyperparams, allow_large: bool) -> Result<f64> {
    Ok(Dense::new(tasks, hyper, allow_large)?.loglik())
}

/// Value and gradient of [`direct_loglik`] over the fixed-kernel,
/// random-kernel and noise coordinates.
pub fn direct_loglik_grad(
    tasks: &[Task],
    hyper: &Hyperparams,
    allow_large: bool,
) -> Result<(f64, Gradient)> {
    let dense = Dense::new(tasks, hyper, allow_large)?;
    let fixed = single_kernel(hyper)?;
    let x = stack(tasks);
    // W = α αᵀ − C⁻¹; ∂L/∂θ = ½ ⟨W, ∂C/∂θ⟩
    let mut w = dense.chol.inverse();
    w.neg_mut();
    w.ger(1.0, &dense.alpha, &dense.alpha, 1.0);
    let d = x.ncols();
    let sq = |r: usize, a: &DMatrix<f64>| {
        let n = a.nrows();
        DMatrix::from_fn(n, n, |p, q| (a[(p, r)] - a[(q, r)]).powi(2))
    };
    let mut coords = Vec::new();
    let mut values = Vec::new();

    let kf = se_cov(fixed, &x, &x)?;
    coords.push(Coord::Fixed {
        kernel: 0,
        param: KernelParam::LogSignalVariance,
    });
    values.push(0.5 * frobenius_dot(&w, &kf));
    for r in 0..d {
        let inv_l2 = 1.0 / fixed.lengthscale(r).powi(2);
        coords.push(Coord::Fixed {
            kernel: 0,
            param: KernelParam::LogLengthscale(r),
        });
        values.push(0.5 * inv_l2 * frobenius_dot(&w, &kf.component_mul(&sq(r, &x))));
    }

    let mut rg = vec![0.0; 1 + d];
    let mut ng = 0.0;
    let mut o = 0;
    for t in tasks {
        let n = t.len();
        let wj = w.view((o, o), (n, n)).into_owned();
        let kr = se_cov(&hyper.random, t.x(), t.x())?;
        rg[0] += frobenius_dot(&wj, &kr);
        for r in 0..d {
            let inv_l2 = (-2.0 * hyper.random.log_lengthscale[r]).exp();
            rg[1 + r] += inv_l2 * frobenius_dot(&wj, &kr.component_mul(&sq(r, t.x())));
        }
        let (s2, shared) = hyper.task_noise(t);
        if shared {
            ng += s2 * wj.trace();
        }
        o += n;
    }
    for (p, g) in hyper.random.params().into_iter().zip(rg) {
        coords.push(Coord::Random(p));
        values.push(0.5 * g);
    }
    coords.push(Coord::Noise);
    values.push(0.5 * ng);
    Ok((dense.loglik(), Gradient { coords, values }))
}

fn stack(tasks: &[Task]) -> DMatrix<f64> {
    let d = tasks.first().map_or(1, Task::dim);
    let n: usize = tasks.iter().map(Task::len).sum();
    let mut x = DMatrix::zeros(n, d);
    let mut o = 0;
    for t in tasks {
        x.view_mut((o, 0), (t.len(), d)).copy_from(t.x());
        o += t.len();
    }
    x
}

/// The full-model bound of the grouped model (every center's inducing set
/// is the full set of distinct inputs). With one center it equals
/// [`direct_loglik`].
pub fn direct_bound(tasks: &[Task], hyper: &Hyperparams, r: &Responsibilities) -> Result<f64> {
    let z = InducingSet::all_inputs(tasks, false)?;
    let params = ModelParams::new(hyper.clone(), vec![z; r.n_centers()])?;
    mstep_bound(tasks, r, &params)
}

/// Exact log likelihood as an [`Objective`]; inducing sets are ignored.
pub struct DirectObjective<'a> {
    pub tasks: &'a [Task],
    pub allow_large: bool,
}

impl Objective for DirectObjective<'_> {
    fn value(&mut self, params: &ModelParams) -> Result<f64> {
        direct_loglik(self.tasks, &params.hyper, self.allow_large)
    }

    fn gradient(&mut self, params: &ModelParams) -> Result<Gradient> {
        Ok(direct_loglik_grad(self.tasks, &params.hyper, self.allow_large)?.1)
    }
}

/// A single-center model fitted by exact inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectModel {
    pub tasks: Vec<Task>,
    pub hyper: Hyperparams,
    pub loglik: f64,
    /// Log likelihood after the warm start and after the full-data ascent.
    pub trace: Vec<f64>,
    pub allow_large: bool,
}

fn ascend(
    tasks: &[Task],
    hyper: Hyperparams,
    iters: usize,
    allow_large: bool,
    config: &GroupedModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Hyperparams, f64)> {
    let d = tasks.first().map_or(1, Task::dim);
    let dummy = InducingSet::new(DMatrix::zeros(1, d), false)?;
    let mut params = ModelParams::new(hyper, vec![dummy])?;
    let mut obj = DirectObjective { tasks, allow_large };
    let v0 = obj.value(&params)?;
    let coords = params.free_coords();
    let mut opt = CoordinateAscent::new(config.ascent.clone());
    let v = opt.run(&mut obj, &mut params, &coords, v0, iters, rng)?;
    debug!("direct ascent on {} tasks: {v0:.4} -> {v:.4}", tasks.len());
    Ok((params.hyper, v))
}

/// Exact inference. One center: hyperparameters maximize the exact log
/// likelihood (warm start on a task subsample, then `mstep_cap` full-data
/// coordinate steps). Several centers: the grouped EM with every distinct
/// input as a frozen inducing point, where the bound is exact.
pub fn direct_fit(
    tasks: &[Task],
    config: &GroupedModelConfig,
    allow_large: bool,
) -> Result<FittedModel> {
    config.validate()?;
    guard(tasks, allow_large)?;
    if config.k > 1 {
        let cfg = GroupedModelConfig {
            inducing_init: InducingInit::AllInputs,
            learn_inducing: false,
            ..config.clone()
        };
        return Ok(FittedModel::Grouped(fit_method(
            tasks,
            &cfg,
            Method::Direct,
        )?));
    }
    if tasks.is_empty() {
        return Err(Error::InvalidInput("at least one task is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut hyper = config
        .init
        .clone()
        .unwrap_or_else(|| default_hyper(tasks, 1, false));
    hyper.fixed.truncate(1);
    let mut trace = Vec::new();
    if !config.optimize_hyper {
        let loglik = direct_loglik(tasks, &hyper, allow_large)?;
        return Ok(FittedModel::Direct(DirectModel {
            tasks: tasks.to_vec(),
            hyper,
            loglik,
            trace: vec![loglik],
            allow_large,
        }));
    }
    let n = config.warm_start_tasks.min(tasks.len());
    if n > 0 && n < tasks.len() && config.warm_start_iters > 0 {
        let mut idx = sample(&mut rng, tasks.len(), n).into_vec();
        idx.sort_unstable();
        let sub: Vec<Task> = idx.iter().map(|&i| tasks[i].clone()).collect();
        let (h, v) = ascend(
            &sub,
            hyper,
            config.warm_start_iters,
            allow_large,
            config,
            &mut rng,
        )?;
        hyper = h;
        trace.push(v);
    }
    let (hyper, loglik) = ascend(
        tasks,
        hyper,
        config.mstep_cap,
        allow_large,
        config,
        &mut rng,
    )?;
    trace.push(loglik);
    Ok(FittedModel::Direct(DirectModel {
        tasks: tasks.to_vec(),
        hyper,
        loglik,
        trace,
        allow_large,
    }))
}

/// Draws each center's inducing subset: `m_k` distinct training inputs
/// chosen uniformly without replacement, reproducible from the seed.
pub fn mtsd_subsets(tasks: &[Task], config: &GroupedModelConfig) -> Result<Vec<DMatrix<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5D5D_5D5D);
    (0..config.k)
        .map(|k| {
            init_inducing(
                tasks,
                config.m_for(k),
                &InducingInit::RandomSubset,
                false,
                &mut rng,
            )
            .map(|s| s.z().clone())
        })
        .collect()
}

/// MT-SD: the variational machinery with a frozen random subset of the
/// inputs as inducing set. With `subset_only` the hyperparameters are
/// learned from the tasks owning a subset point alone and then held fixed
/// while the remaining variational factors are fitted on all tasks.
pub fn mtsd_fit(
    tasks: &[Task],
    config: &GroupedModelConfig,
    subset_only: bool,
) -> Result<GroupedModel> {
    config.validate()?;
    let zs = mtsd_subsets(tasks, config)?;
    let cfg = GroupedModelConfig {
        inducing_init: InducingInit::Given(zs.clone()),
        learn_inducing: false,
        ..config.clone()
    };
    if !subset_only || !config.optimize_hyper {
        return fit_method(tasks, &cfg, Method::MtSd);
    }
    let owners: Vec<Task> = tasks
        .iter()
        .filter(|t| {
            zs.iter()
                .any(|z| (0..t.len()).any(|i| (0..z.nrows()).any(|q| t.x().row(i) == z.row(q))))
        })
        .cloned()
        .collect();
    let hyper = fit_method(&owners, &cfg, Method::MtSd)?.params.hyper;
    let cfg = GroupedModelConfig {
        optimize_hyper: false,
        init: Some(hyper),
        warm_start_iters: 0,
        ..cfg
    };
    fit_method(tasks, &cfg, Method::MtSd)
}

/// MT-PP: inducing locations and hyperparameters learned on the bound
/// without its trace penalty.
pub fn mtpp_fit(tasks: &[Task], config: &GroupedModelConfig) -> Result<GroupedModel> {
    let cfg = GroupedModelConfig {
        objective: ObjectiveKind::NoTrace,
        ..config.clone()
    };
    fit_method(tasks, &cfg, Method::MtPp)
}

/// Exact predictive moments of `f^j(x*)` for training tasks.
///
/// The fixed-effect part of `K†(x*, x̆)` is shared by every task, so its
/// products with `C⁻¹` are cached for the most recent `x*`.
pub struct DirectPredictor<'a> {
    model: &'a DirectModel,
    alpha: DVector<f64>,
    cinv: DMatrix<f64>,
    x: DMatrix<f64>,
    offsets: Vec<usize>,
    cache: RefCell<Option<SharedPart>>,
}

struct SharedPart {
    x_star: DMatrix<f64>,
    /// `C⁻¹ K_f(x̆, x*)`
    g: DMatrix<f64>,
    mean: DVector<f64>,
    quad: DVector<f64>,
}

impl<'a> DirectPredictor<'a> {
    pub fn new(model: &'a DirectModel) -> Result<Self> {
        let dense = Dense::new(&model.tasks, &model.hyper, model.allow_large)?;
        let mut offsets = vec![0];
        for t in &model.tasks {
            offsets.push(offsets.last().unwrap() + t.len());
        }
        Ok(DirectPredictor {
            model,
            cinv: dense.chol.inverse(),
            alpha: dense.alpha,
            x: stack(&model.tasks),
            offsets,
            cache: RefCell::new(None),
        })
    }

    fn shared(&self, x_star: &DMatrix<f64>) -> Result<()> {
        let mut cache = self.cache.borrow_mut();
        if cache.as_ref().is_some_and(|c| &c.x_star == x_star) {
            return Ok(());
        }
        let kf = se_cov(&self.model.hyper.fixed[0], &self.x, x_star)?;
        let g = &self.cinv * &kf;
        let mean = kf.tr_mul(&self.alpha);
        let quad = DVector::from_fn(x_star.nrows(), |i, _| kf.column(i).dot(&g.column(i)));
        *cache = Some(SharedPart {
            x_star: x_star.clone(),
            g,
            mean,
            quad,
        });
        Ok(())
    }

    pub fn predict(&self, task_id: usize, x_star: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        let t = self
            .model
            .tasks
            .get(task_id)
            .ok_or(Error::UnknownTask(task_id))?;
        if x_star.ncols() != t.dim() {
            return Err(Error::DimensionMismatch(
                "test inputs and task inputs differ in dimension".into(),
            ));
        }
        self.shared(x_star)?;
        let cache = self.cache.borrow();
        let sh = cache.as_ref().expect("filled above");
        let (o, n) = (self.offsets[task_id], t.len());
        let hyper = &self.model.hyper;
        // task-specific part of K†(x̆, x*): random-effect block on task j rows
        let kr = se_cov(&hyper.random, t.x(), x_star)?;
        let cjj = self.cinv.view((o, o), (n, n));
        let gj = sh.g.rows(o, n);
        let aj = self.alpha.rows(o, n);
        let prior = hyper.fixed[0].signal_variance() + hyper.random.signal_variance();
        let ns = x_star.nrows();
        let mut mean = vec![0.0; ns];
        let mut var = vec![0.0; ns];
        for i in 0..ns {
            let ri = kr.column(i);
            mean[i] = sh.mean[i] + ri.dot(&aj);
            let cross = ri.dot(&gj.column(i));
            let self_q = (cjj * ri).dot(&ri);
            var[i] = prior - sh.quad[i] - 2.0 * cross - self_q;
            if !(var[i] > 0.0) {
                return Err(Error::NonPositiveVariance(i));
            }
        }
        Ok(PredictiveDistribution { mean, var })
    }
}

/// Exact predictive of training task `task_id` at `x_star`.
pub fn direct_predict(
    task_id: usize,
    x_star: &DMatrix<f64>,
    tasks: &[Task],
    hyper: &Hyperparams,
) -> Result<PredictiveDistribution> {
    let model = DirectModel {
        tasks: tasks.to_vec(),
        hyper: hyper.clone(),
        loglik: f64::NAN,
        trace: Vec::new(),
        allow_large: false,
    };
    DirectPredictor::new(&model)?.predict(task_id, x_star)
}

/// Output of any fitting method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedModel {
    Grouped(GroupedModel),
    Direct(DirectModel),
}

/// Predictions for the training tasks of a fitted model.
pub trait TaskPredictor {
    fn predict_existing(
        &self,
        task_id: usize,
        x_star: &DMatrix<f64>,
    ) -> Result<PredictiveDistribution>;
}

impl TaskPredictor for GroupedPredictor<'_> {
    fn predict_existing(
        &self,
        task_id: usize,
        x_star: &DMatrix<f64>,
    ) -> Result<PredictiveDistribution> {
        GroupedPredictor::predict_existing(self, task_id, x_star)
    }
}

impl TaskPredictor for DirectPredictor<'_> {
    fn predict_existing(
        &self,
        task_id: usize,
        x_star: &DMatrix<f64>,
    ) -> Result<PredictiveDistribution> {
        self.predict(task_id, x_star)
    }
}

impl FittedModel {
    pub fn method(&self) -> Method {
        match self {
            FittedModel::Grouped(m) => m.method,
            FittedModel::Direct(_) => Method::Direct,
        }
    }

    pub fn tasks(&self) -> &[Task] {
        match self {
            FittedModel::Grouped(m) => &m.tasks,
            FittedModel::Direct(m) => &m.tasks,
        }
    }

    pub fn hyper(&self) -> &Hyperparams {
        match self {
            FittedModel::Grouped(m) => &m.params.hyper,
            FittedModel::Direct(m) => &m.hyper,
        }
    }

    /// The objective the fit maximized: the variational bound, or the exact
    /// log likelihood.
    pub fn objective(&self) -> f64 {
        match self {
            FittedModel::Grouped(m) => m.elbo,
            FittedModel::Direct(m) => m.loglik,
        }
    }

    pub fn predictor(&self) -> Result<Box<dyn TaskPredictor + '_>> {
        Ok(match self {
            FittedModel::Grouped(m) => Box::new(GroupedPredictor::new(m)?),
            FittedModel::Direct(m) => Box::new(DirectPredictor::new(m)?),
        })
    }
}

/// A fitted model as stored on disk. Targets were shifted by
/// `-target_offset` before fitting; predictions add it back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub schema: String,
    pub version: u32,
    pub target_offset: f64,
    pub model: FittedModel,
}

impl SavedModel {
    pub fn new(model: FittedModel, target_offset: f64) -> Self {
        SavedModel {
            schema: FIT_SCHEMA.to_string(),
            version: FIT_VERSION,
            target_offset,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let schema = v.get("schema").and_then(|x| x.as_str()).unwrap_or("");
        let version = v.get("version").and_then(|x| x.as_u64());
        if schema != FIT_SCHEMA || version != Some(FIT_VERSION as u64) {
            return Err(Error::SchemaVersion {
                found: format!("{schema} {version:?}"),
                expected: format!("{FIT_SCHEMA} {FIT_VERSION}"),
            });
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Fits `method` with the given configuration.
pub fn fit_any(
    tasks: &[Task],
    config: &GroupedModelConfig,
    method: Method,
    allow_large: bool,
) -> Result<FittedModel> {
    Ok(match method {
        Method::MtVar => FittedModel::Grouped(fit_method(tasks, config, Method::MtVar)?),
        Method::Direct => direct_fit(tasks, config, allow_large)?,
        Method::MtSd => FittedModel::Grouped(mtsd_fit(tasks, config, false)?),
        Method::MtPp => FittedModel::Grouped(mtpp_fit(tasks, config)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::NoiseParams;
    use crate::sparse_core::bound_value;

    fn hyper(s2: f64, l: f64, rs2: f64, noise: f64) -> Hyperparams {
        Hyperparams::new(
            SeKernelParams::new(s2, &[l]),
            if rs2 > 0.0 {
                SeKernelParams::new(rs2, &[0.8])
            } else {
                SeKernelParams::zero(1)
            },
            NoiseParams::shared(noise),
        )
    }

    fn toy() -> Vec<Task> {
        vec![
            Task::from_1d(&[-1.0, 0.0, 1.2], &[0.5, 1.0, 0.2]).unwrap(),
            Task::from_1d(&[-0.5, 0.4], &[-0.3, -0.8]).unwrap(),
            Task::from_1d(&[0.1, 1.5, -2.0, 0.0], &[0.9, 0.3, 0.0, 0.7]).unwrap(),
        ]
    }

    #[test]
    fn one_point_is_a_scalar_gaussian() {
        let t = vec![Task::from_1d(&[0.3], &[1.7]).unwrap()];
        let h = hyper(1.3, 1.0, 0.4, 0.2);
        let v = 1.3 + 0.4 + 0.2;
        let want = -0.5 * (2.0 * std::f64::consts::PI * v).ln() - 1.7 * 1.7 / (2.0 * v);
        assert!((direct_loglik(&t, &h, false).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn size_guard() {
        let x: Vec<f64> = (0..SIZE_GUARD + 1).map(|i| i as f64).collect();
        let t = vec![Task::from_1d(&x, &x).unwrap()];
        assert!(matches!(
            direct_loglik(&t, &hyper(1.0, 1.0, 0.0, 0.1), false),
            Err(Error::SizeGuard { .. })
        ));
    }

    #[test]
    fn matches_sufficient_bound() {
        let tasks = toy();
        let h = hyper(1.1, 0.9, 0.3, 0.15);
        let z = InducingSet::all_inputs(&tasks, false).unwrap();
        let b = bound_value(&tasks, &z, &h).unwrap();
        let d = direct_loglik(&tasks, &h, false).unwrap();
        assert!((b - d).abs() < 1e-6, "{b} vs {d}");
        let r = Responsibilities::uniform(tasks.len(), 1);
        assert!((direct_bound(&tasks, &h, &r).unwrap() - d).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let tasks = toy();
        let h = hyper(1.1, 0.9, 0.3, 0.15);
        let (_, g) = direct_loglik_grad(&tasks, &h, false).unwrap();
        let z = InducingSet::new(DMatrix::zeros(1, 1), false).unwrap();
        let p = ModelParams::new(h, vec![z]).unwrap();
        for (c, an) in g.coords.iter().zip(&g.values) {
            let eps = 1e-5;
            let mut a = p.clone();
            a.set(*c, p.get(*c).unwrap() + eps).unwrap();
            let mut b = p.clone();
            b.set(*c, p.get(*c).unwrap() - eps).unwrap();
            let fd = (direct_loglik(&tasks, &a.hyper, false).unwrap()
                - direct_loglik(&tasks, &b.hyper, false).unwrap())
                / (2.0 * eps);
            assert!(
                (fd - an).abs() < 1e-6 * an.abs().max(1.0),
                "{c:?}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn interpolates_without_noise() {
        let tasks = toy();
        let h = hyper(1.0, 1.0, 0.3, 1e-10);
        let xs = DMatrix::from_column_slice(2, 1, &[-1.0, 1.2]);
        let p = direct_predict(0, &xs, &tasks, &h).unwrap();
        assert!((p.mean[0] - 0.5).abs() < 1e-4);
        assert!((p.mean[1] - 0.2).abs() < 1e-4);
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let tasks = toy();
        let h = hyper(1.0, 1.0, 0.3, 0.1);
        let xs = DMatrix::from_column_slice(1, 1, &[100.0]);
        let p = direct_predict(1, &xs, &tasks, &h).unwrap();
        assert!(p.mean[0].abs() < 1e-6);
        assert!((p.var[0] - 1.3).abs() < 1e-6);
    }

    #[test]
    fn single_task_matches_textbook_gp() {
        let t = Task::from_1d(&[-1.0, 0.2, 0.9], &[0.4, -0.1, 0.6]).unwrap();
        let h = hyper(0.8, 0.7, 0.0, 0.05);
        let xs = DMatrix::from_column_slice(3, 1, &[-0.4, 0.5, 2.0]);
        let p = direct_predict(0, &xs, std::slice::from_ref(&t), &h).unwrap();
        // K(x*,X)(K + σ²I)⁻¹y and k** − K(x*,X)(K + σ²I)⁻¹K(X,x*)
        let k = se_cov(&h.fixed[0], t.x(), t.x()).unwrap() + DMatrix::identity(3, 3) * 0.05;
        let ks = se_cov(&h.fixed[0], &xs, t.x()).unwrap();
        let kinv = k.try_inverse().unwrap();
        let mean = &ks * &kinv * t.y();
        let cov = se_cov(&h.fixed[0], &xs, &xs).unwrap() - &ks * &kinv * ks.transpose();
        for i in 0..3 {
            assert!((p.mean[i] - mean[i]).abs() < 1e-10);
            assert!((p.var[i] - cov[(i, i)]).abs() < 1e-10);
        }
    }

    #[test]
    fn cached_fixed_part_does_not_leak_between_tasks() {
        let tasks = toy();
        let h = hyper(1.0, 1.0, 0.3, 0.1);
        let model = DirectModel {
            tasks: tasks.clone(),
            hyper: h.clone(),
            loglik: 0.0,
            trace: vec![],
            allow_large: false,
        };
        let pr = DirectPredictor::new(&model).unwrap();
        let xs = DMatrix::from_column_slice(2, 1, &[0.0, 0.7]);
        for j in [2, 0, 1, 0] {
            let a = pr.predict(j, &xs).unwrap();
            let b = direct_predict(j, &xs, &tasks, &h).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mtsd_subset_is_reproducible() {
        let tasks = toy();
        let cfg = GroupedModelConfig {
            k: 2,
            m: vec![3],
            seed: 4,
            ..Default::default()
        };
        let a = mtsd_subsets(&tasks, &cfg).unwrap();
        assert_eq!(a, mtsd_subsets(&tasks, &cfg).unwrap());
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].nrows(), 3);
    }
}
