//! IVGTT glucose minimal-model cohort.
//!
//! Each subject integrates
//!
//! ```text
//! G' = -(S_G + X) G + S_G G_b + δ(t) D / V
//! X' = -p2 X + p2 S_I (I(t) - I_b)
//! G(0) = G_b, X(0) = 0
//! ```
//!
//! with an embedded Dormand–Prince 5(4) pair. The injection δ is a half
//! Gaussian on t ≥ 0 with unit mass, so the dose is exactly D / V.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{derive_seed, DataTask, Dataset, Points};
use crate::error::{Error, Result};

const PEAK_TIME: f64 = 5.0;
const DECAY: f64 = 40.0;
const PEAK_EXCESS: f64 = 90.0;
const MIN_SD: f64 = 1e-3;

/// Plasma insulin I(t) (μU/ml), assumed known.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InsulinProfile {
    /// `I_b + A (e^{-t/40} - e^{-t/τ})`, peaking 90 above basal at t = 5.
    #[default]
    Default,
    /// Constant at the basal level.
    Basal,
    /// Natural cubic spline through measured `(t, I)` pairs, held constant
    /// outside the table.
    Tabulated { t: Vec<f64>, i: Vec<f64> },
}

impl InsulinProfile {
    pub fn validate(&self) -> Result<()> {
        if let InsulinProfile::Tabulated { t, i } = self {
            let ok = t.len() == i.len()
                && t.len() >= 2
                && t.windows(2).all(|w| w[0] < w[1])
                && t.iter().chain(i).all(|v| v.is_finite());
            if !ok {
                return Err(Error::InvalidInput(
                    "tabulated insulin needs >= 2 finite points with increasing times".into(),
                ));
            }
        }
        Ok(())
    }

    /// Precomputes the evaluator.
    pub fn curve(&self, basal: f64) -> InsulinCurve {
        match self {
            InsulinProfile::Default => {
                let tau = pulse_rise();
                let amp = PEAK_EXCESS / ((-PEAK_TIME / DECAY).exp() - (-PEAK_TIME / tau).exp());
                InsulinCurve::Pulse { basal, amp, tau }
            }
            InsulinProfile::Basal => InsulinCurve::Flat(basal),
            InsulinProfile::Tabulated { t, i } => InsulinCurve::Spline(Spline::natural(t, i)),
        }
    }
}

/// Rise constant τ < PEAK_TIME of the default pulse: the nontrivial root of
/// `e^{-t_p/τ}/τ = e^{-t_p/40}/40`.
fn pulse_rise() -> f64 {
    let target = (-PEAK_TIME / DECAY).exp() / DECAY;
    let f = |tau: f64| (-PEAK_TIME / tau).exp() / tau - target;
    // f < 0 near 0, f > 0 at the maximum τ = t_p
    let (mut lo, mut hi) = (0.05, PEAK_TIME);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Debug)]
pub enum InsulinCurve {
    Pulse { basal: f64, amp: f64, tau: f64 },
    Flat(f64),
    Spline(Spline),
}

impl InsulinCurve {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            InsulinCurve::Pulse { basal, amp, tau } => {
                basal + amp * ((-t / DECAY).exp() - (-t / tau).exp())
            }
            InsulinCurve::Flat(b) => *b,
            InsulinCurve::Spline(s) => s.at(t),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Spline {
    t: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Spline {
    fn natural(t: &[f64], y: &[f64]) -> Spline {
        let n = t.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // tridiagonal system for interior second derivatives (Thomas)
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            let mut sub = vec![0.0; k];
            for i in 0..k {
                let h0 = t[i + 1] - t[i];
                let h1 = t[i + 2] - t[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                sub[i] = h0;
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h1 - (y[i + 1] - y[i]) / h0);
            }
            for i in 1..k {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * sub[i];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - sub[i + 1] * m[i + 2]) / diag[i];
            }
        }
        Spline {
            t: t.to_vec(),
            y: y.to_vec(),
            m,
        }
    }

    fn at(&self, x: f64) -> f64 {
        let n = self.t.len();
        if x <= self.t[0] {
            return self.y[0];
        }
        if x >= self.t[n - 1] {
            return self.y[n - 1];
        }
        let i = self.t.partition_point(|&v| v <= x) - 1;
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - x) / h;
        let b = (x - self.t[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlucoseSpec {
    pub subjects: usize,
    /// Mean of (S_G, S_I, p2, V) in table units.
    pub mean: [f64; 4],
    /// Diagonal covariance in table units.
    pub var: [f64; 4],
    /// Multipliers from table units to per-minute units.
    pub scale: [f64; 4],
    pub g_b: f64,
    pub i_b: f64,
    pub dose: f64,
    pub insulin: InsulinProfile,
    /// Range of the injection SD (minutes).
    pub sd_range: (f64, f64),
    pub noise: f64,
    pub interval: (f64, f64),
    pub train_points: usize,
    pub test_points: usize,
    pub seed: u64,
}

impl Default for GlucoseSpec {
    fn default() -> Self {
        GlucoseSpec {
            subjects: 1000,
            mean: [2.67, 6.42, 4.82, 1.64],
            var: [1.02, 6.90, 2.34, 0.22],
            scale: [1e-2, 1e-4, 1e-2, 1.0],
            g_b: 84.0,
            i_b: 11.0,
            dose: 300.0,
            insulin: InsulinProfile::Default,
            sd_range: (0.0, 1.0),
            noise: 1.0,
            interval: (1.0, 240.0),
            train_points: 5,
            test_points: 10,
            seed: 0,
        }
    }
}

impl GlucoseSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .mean
            .iter()
            .chain(&self.var)
            .chain(&self.scale)
            .chain(&[self.g_b, self.i_b, self.dose, self.noise])
            .all(|v| v.is_finite());
        let ok = finite
            && self.subjects >= 1
            && self.train_points >= 1
            && self.var.iter().all(|&v| v >= 0.0)
            && self.scale.iter().all(|&v| v > 0.0)
            && self.mean.iter().all(|&v| v > 0.0)
            && self.noise >= 0.0
            && self.dose >= 0.0
            && 0.0 <= self.sd_range.0
            && self.sd_range.0 <= self.sd_range.1
            && 0.0 <= self.interval.0
            && self.interval.0 < self.interval.1;
        if !ok {
            return Err(Error::InvalidInput(format!(
                "invalid glucose spec {self:?}"
            )));
        }
        self.insulin.validate()
    }
}

/// Kinetic parameters of one subject, in per-minute units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    pub s_g: f64,
    pub s_i: f64,
    pub p2: f64,
    pub v: f64,
    /// Injection profile SD (minutes).
    pub sd: f64,
}

impl SubjectParams {
    /// Draws subject `j`'s parameters, redrawing until all four are positive.
    pub fn draw(spec: &GlucoseSpec, j: usize) -> SubjectParams {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2 * j as u64));
        Self::draw_with(spec, &mut rng)
    }

    fn draw_with(spec: &GlucoseSpec, rng: &mut ChaCha8Rng) -> SubjectParams {
        let p = loop {
            let p: [f64; 4] = std::array::from_fn(|i| {
                spec.mean[i] + spec.var[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
            });
            if p.iter().all(|&v| v > 0.0) {
                break p;
            }
        };
        let (lo, hi) = spec.sd_range;
        let sd = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        SubjectParams {
            s_g: p[0] * spec.scale[0],
            s_i: p[1] * spec.scale[1],
            p2: p[2] * spec.scale[2],
            v: p[3] * spec.scale[3],
            sd: sd.max(MIN_SD),
        }
    }

    /// Unit-mass half-Gaussian injection profile.
    pub fn injection(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let z = t / self.sd;
        2.0 * (-0.5 * z * z).exp() / (self.sd * (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// Right-hand side of the minimal model for `(G, X)`.
pub fn minimal_model(
    spec: &GlucoseSpec,
    p: &SubjectParams,
    insulin: &InsulinCurve,
    t: f64,
    y: [f64; 2],
) -> [f64; 2] {
    let [g, x] = y;
    let dg = -(p.s_g + x) * g + p.s_g * spec.g_b + p.injection(t) * spec.dose / p.v;
    let dx = -p.p2 * x + p.p2 * p.s_i * (insulin.at(t) - spec.i_b);
    [dg, dx]
}

const RTOL: f64 = 1e-8;
const ATOL: f64 = 1e-10;
const MAX_STEPS: usize = 1_000_000;

/// Adaptive Dormand–Prince 5(4) step from `t0` to exactly `t1`.
fn dopri5<F: Fn(f64, [f64; 2]) -> [f64; 2]>(
    f: &F,
    t0: f64,
    y0: [f64; 2],
    t1: f64,
    h_max: f64,
    h: &mut f64,
) -> std::result::Result<[f64; 2], (f64, String)> {
    const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    const A: [&[f64]; 6] = [
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
        ],
        &[
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
        ],
        &[
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    // fifth minus fourth order weights
    const E: [f64; 7] = [
        35.0 / 384.0 - 5179.0 / 57600.0,
        0.0,
        500.0 / 1113.0 - 7571.0 / 16695.0,
        125.0 / 192.0 - 393.0 / 640.0,
        -2187.0 / 6784.0 + 92097.0 / 339200.0,
        11.0 / 84.0 - 187.0 / 2100.0,
        -1.0 / 40.0,
    ];
    let mut t = t0;
    let mut y = y0;
    let mut k = [[0.0; 2]; 7];
    k[0] = f(t, y);
    let mut steps = 0;
    *h = h.min(h_max);
    while t < t1 {
        steps += 1;
        if steps > MAX_STEPS {
            return Err((t, "step limit exceeded".into()));
        }
        let last = t + *h >= t1;
        let hs = if last { t1 - t } else { *h };
        if hs <= 1e-14 * t.abs().max(1.0) && !last {
            return Err((t, "step size underflow".into()));
        }
        for s in 0..6 {
            let mut ys = y;
            for (i, a) in A[s].iter().enumerate() {
                ys[0] += hs * a * k[i][0];
                ys[1] += hs * a * k[i][1];
            }
            k[s + 1] = f(t + C[s] * hs, ys);
            if s == 5 {
                // the last stage point is the fifth order solution
                let mut err = 0.0;
                for d in 0..2 {
                    let e: f64 = (0..7).map(|i| E[i] * k[i][d]).sum::<f64>() * hs;
                    let sc = ATOL + RTOL * y[d].abs().max(ys[d].abs());
                    err += (e / sc).powi(2);
                }
                let err = (err / 2.0).sqrt();
                if !err.is_finite() {
                    *h = hs * 0.2;
                    break;
                }
                let factor = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
                if err <= 1.0 {
                    t = if last { t1 } else { t + hs };
                    y = ys;
                    k[0] = k[6];
                    if !last {
                        *h = (hs * factor).min(h_max);
                    }
                } else {
                    *h = (hs * factor).min(h_max);
                    if *h <= 1e-14 * t.abs().max(1.0) {
                        return Err((t, "step size underflow".into()));
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Glucose `G(t)` at each time in `times` (any order, all ≥ 0).
pub fn solve_subject(
    spec: &GlucoseSpec,
    p: &SubjectParams,
    times: &[f64],
) -> std::result::Result<Vec<f64>, (f64, String)> {
    let insulin = spec.insulin.curve(spec.i_b);
    let f = |t: f64, y: [f64; 2]| minimal_model(spec, p, &insulin, t, y);
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let pulse_end = 8.0 * p.sd;
    let mut out = vec![0.0; times.len()];
    let mut t = 0.0;
    let mut y = [spec.g_b, 0.0];
    let mut h = (p.sd / 4.0).min(0.01);
    for &i in &order {
        let target = times[i];
        if !(target >= 0.0 && target.is_finite()) {
            return Err((target, "evaluation time must be finite and >= 0".into()));
        }
        // resolve the injection with small steps before the long tail
        if t < pulse_end && target > pulse_end {
            y = dopri5(&f, t, y, pulse_end, p.sd / 4.0, &mut h)?;
            t = pulse_end;
        }
        let h_max = if target <= pulse_end {
            p.sd / 4.0
        } else {
            f64::INFINITY
        };
        if target > t {
            y = dopri5(&f, t, y, target, h_max, &mut h)?;
            t = target;
        }
        out[i] = y[0];
    }
    Ok(out)
}

/// Simulated cohort: one task per subject with time (minutes) as input.
pub fn simulate_glucose(spec: &GlucoseSpec) -> Result<Dataset> {
    spec.validate()?;
    let (lo, hi) = spec.interval;
    let sd = spec.noise.sqrt();
    let n_tr = spec.train_points;
    let n_te = spec.test_points;
    let mut tasks = Vec::with_capacity(spec.subjects);
    for j in 0..spec.subjects {
        let p = SubjectParams::draw(spec, j);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2 * j as u64 + 1));
        let times: Vec<f64> = (0..n_tr + n_te).map(|_| rng.random_range(lo..hi)).collect();
        let truth =
            solve_subject(spec, &p, &times).map_err(|(t, reason)| Error::IntegrationFailure {
                subject: j,
                t,
                reason,
            })?;
        let y: Vec<f64> = truth
            .iter()
            .map(|g| g + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let split = |a: usize, b: usize| Points {
            x: DMatrix::from_column_slice(b - a, 1, &times[a..b]),
            y: y[a..b].to_vec(),
            truth: truth[a..b].to_vec(),
        };
        tasks.push(DataTask {
            label: None,
            noise: None,
            train: split(0, n_tr),
            test: split(n_tr, n_tr + n_te),
        });
    }
    Ok(Dataset {
        spec: serde_json::json!({ "generator": "glucose", "spec": spec }),
        dim: 1,
        tasks,
    })
}
