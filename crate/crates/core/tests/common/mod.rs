//! Dense reference implementations and random instance generators shared by
//! the integration tests. Everything here materializes full matrices and
//! uses plain inverses; it is slow and only meant for small problems.

#![allow(dead_code)]

use megp::grouped::Responsibilities;
use megp::kernels::{KernelParam, NoiseParams, SeKernelParams};
use megp::sparse_core::{Coord, Hyperparams, InducingSet, ModelParams, Task};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// `s² exp(−½ Σ (a_r − b_r)² / ℓ_r²)`, zero for a switched-off kernel.
pub fn k_se(p: &SeKernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if p.log_signal_variance == f64::NEG_INFINITY {
        return DMatrix::zeros(a.nrows(), b.nrows());
    }
    let s2 = p.log_signal_variance.exp();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let q: f64 = (0..a.ncols())
            .map(|r| {
                let l = p.log_lengthscale[r].exp();
                ((a[(i, r)] - b[(j, r)]) / l).powi(2)
            })
            .sum();
        s2 * (-0.5 * q).exp()
    })
}

/// Derivative of [`k_se`] with respect to log s² (`which = 0`) or log ℓ_r
/// (`which = 1 + r`).
pub fn dk_se(p: &SeKernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>, which: usize) -> DMatrix<f64> {
    let k = k_se(p, a, b);
    if which == 0 {
        return k;
    }
    let r = which - 1;
    let l2 = (2.0 * p.log_lengthscale[r]).exp();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        k[(i, j)] * (a[(i, r)] - b[(j, r)]).powi(2) / l2
    })
}

fn param_index(p: KernelParam) -> usize {
    match p {
        KernelParam::LogSignalVariance => 0,
        KernelParam::LogLengthscale(r) => 1 + r,
    }
}

pub fn inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible")
}

pub fn logdet(m: &DMatrix<f64>) -> f64 {
    let l = m.clone().cholesky().expect("SPD").unpack();
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn gauss_logpdf(y: &DVector<f64>, c: &DMatrix<f64>) -> f64 {
    let a = inv(c) * y;
    -0.5 * (y.len() as f64 * LN_2PI + logdet(c) + y.dot(&a))
}

pub fn stack_x(tasks: &[Task]) -> DMatrix<f64> {
    let n: usize = tasks.iter().map(|t| t.len()).sum();
    let d = tasks[0].dim();
    let mut x = DMatrix::zeros(n, d);
    let mut o = 0;
    for t in tasks {
        x.rows_mut(o, t.len()).copy_from(t.x());
        o += t.len();
    }
    x
}

pub fn stack_y(tasks: &[Task]) -> DVector<f64> {
    DVector::from_iterator(
        tasks.iter().map(|t| t.len()).sum(),
        tasks.iter().flat_map(|t| t.y().iter().copied()),
    )
}

pub fn offsets(tasks: &[Task]) -> Vec<usize> {
    let mut o = vec![0];
    for t in tasks {
        o.push(o.last().unwrap() + t.len());
    }
    o
}

pub fn noise_of(h: &Hyperparams, t: &Task) -> (f64, bool) {
    match (h.noise.per_task, t.noise()) {
        (true, Some(s)) => (s, false),
        _ => (h.noise.log_noise_variance.exp(), true),
    }
}

/// `K̃(x_j, x_j) + σ_j² I`
pub fn khat(h: &Hyperparams, t: &Task) -> DMatrix<f64> {
    let mut k = k_se(&h.random, t.x(), t.x());
    let (s2, _) = noise_of(h, t);
    for i in 0..t.len() {
        k[(i, i)] += s2;
    }
    k
}

/// Exact log marginal likelihood of the single-center mixed-effect model.
pub fn dense_loglik(tasks: &[Task], h: &Hyperparams) -> f64 {
    let x = stack_x(tasks);
    let off = offsets(tasks);
    let mut c = k_se(&h.fixed[0], &x, &x);
    for (j, t) in tasks.iter().enumerate() {
        let blk = khat(h, t);
        let mut v = c.view_mut((off[j], off[j]), (t.len(), t.len()));
        v += blk;
    }
    gauss_logpdf(&stack_y(tasks), &c)
}

fn fixed_of(p: &ModelParams, k: usize) -> &SeKernelParams {
    &p.hyper.fixed[if p.hyper.fixed.len() == 1 { 0 } else { k }]
}

fn kernel_of(p: &ModelParams, k: usize) -> usize {
    if p.hyper.fixed.len() == 1 {
        0
    } else {
        k
    }
}

struct Center {
    knz: DMatrix<f64>,
    kzz_inv: DMatrix<f64>,
    c_inv: DMatrix<f64>,
    alpha: DVector<f64>,
}

/// Value of the grouped bound with every N × N matrix formed explicitly.
/// `trace = false` gives the projected-process objective.
pub fn dense_mstep(tasks: &[Task], r: &DMatrix<f64>, p: &ModelParams, trace: bool) -> f64 {
    dense_mstep_full(tasks, r, p, trace, false).0
}

/// Value and gradient over `p.all_coords()`.
pub fn dense_mstep_grad(
    tasks: &[Task],
    r: &DMatrix<f64>,
    p: &ModelParams,
    trace: bool,
) -> (f64, Vec<(Coord, f64)>) {
    let (v, g) = dense_mstep_full(tasks, r, p, trace, true);
    (v, g.expect("requested"))
}

fn dense_mstep_full(
    tasks: &[Task],
    r: &DMatrix<f64>,
    p: &ModelParams,
    trace: bool,
    want_grad: bool,
) -> (f64, Option<Vec<(Coord, f64)>>) {
    let kc = p.inducing.len();
    let x = stack_x(tasks);
    let y = stack_y(tasks);
    let off = offsets(tasks);
    let n = y.len();
    let kh: Vec<DMatrix<f64>> = tasks.iter().map(|t| khat(&p.hyper, t)).collect();
    let kh_inv: Vec<DMatrix<f64>> = kh.iter().map(inv).collect();
    let mut value = 0.5 * (kc as f64 - 1.0) * kh.iter().map(logdet).sum::<f64>();
    let mut centers = Vec::new();
    for k in 0..kc {
        let f = fixed_of(p, k);
        let z = p.inducing[k].z();
        let knz = k_se(f, &x, z);
        let kzz_inv = inv(&k_se(f, z, z));
        let q = &knz * &kzz_inv * knz.transpose();
        let mut c = q.clone();
        for (j, t) in tasks.iter().enumerate() {
            let w = r[(j, k)].max(1e-12);
            let mut v = c.view_mut((off[j], off[j]), (t.len(), t.len()));
            v += &kh[j] / w;
        }
        value += gauss_logpdf(&y, &c);
        if trace {
            for (j, t) in tasks.iter().enumerate() {
                let kjj = k_se(f, t.x(), t.x());
                let qjj = q.view((off[j], off[j]), (t.len(), t.len()));
                value -= 0.5 * r[(j, k)] * ((kjj - qjj) * &kh_inv[j]).trace();
            }
        }
        let c_inv = inv(&c);
        let alpha = &c_inv * &y;
        centers.push(Center {
            knz,
            kzz_inv,
            c_inv,
            alpha,
        });
    }
    if !want_grad {
        return (value, None);
    }

    let mut grad = Vec::new();
    for coord in p.all_coords() {
        // derivatives of K̂_jj
        let dkh: Vec<DMatrix<f64>> = tasks
            .iter()
            .map(|t| match coord {
                Coord::Random(kp) => dk_se(&p.hyper.random, t.x(), t.x(), param_index(kp)),
                Coord::Noise => {
                    let (s2, shared) = noise_of(&p.hyper, t);
                    DMatrix::identity(t.len(), t.len()) * if shared { s2 } else { 0.0 }
                }
                _ => DMatrix::zeros(t.len(), t.len()),
            })
            .collect();
        let mut g = 0.5
            * (kc as f64 - 1.0)
            * (0..tasks.len())
                .map(|j| (&kh_inv[j] * &dkh[j]).trace())
                .sum::<f64>();
        for (k, cen) in centers.iter().enumerate() {
            let f = fixed_of(p, k);
            let z = p.inducing[k].z();
            let m = z.nrows();
            // derivatives of K_nz, K_zz and the diagonal blocks K_jj
            let (dknz, dkzz, dkjj): (DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>) = match coord {
                Coord::Fixed { kernel, param } if kernel == kernel_of(p, k) => {
                    let w = param_index(param);
                    (
                        dk_se(f, &x, z, w),
                        dk_se(f, z, z, w),
                        tasks.iter().map(|t| dk_se(f, t.x(), t.x(), w)).collect(),
                    )
                }
                Coord::Inducing { center, row, dim } if center == k => {
                    let l2 = (2.0 * f.log_lengthscale[dim]).exp();
                    let mut dknz = DMatrix::zeros(n, m);
                    for i in 0..n {
                        dknz[(i, row)] = cen.knz[(i, row)] * (x[(i, dim)] - z[(row, dim)]) / l2;
                    }
                    let kzz = k_se(f, z, z);
                    let mut dkzz = DMatrix::zeros(m, m);
                    for q in 0..m {
                        if q != row {
                            let v = kzz[(row, q)] * (z[(q, dim)] - z[(row, dim)]) / l2;
                            dkzz[(row, q)] = v;
                            dkzz[(q, row)] = v;
                        }
                    }
                    (
                        dknz,
                        dkzz,
                        tasks
                            .iter()
                            .map(|t| DMatrix::zeros(t.len(), t.len()))
                            .collect(),
                    )
                }
                _ => (
                    DMatrix::zeros(n, m),
                    DMatrix::zeros(m, m),
                    tasks
                        .iter()
                        .map(|t| DMatrix::zeros(t.len(), t.len()))
                        .collect(),
                ),
            };
            let pk = &cen.kzz_inv;
            let dq = &dknz * pk * cen.knz.transpose() + &cen.knz * pk * dknz.transpose()
                - &cen.knz * pk * &dkzz * pk * cen.knz.transpose();
            let mut dc = dq.clone();
            for (j, t) in tasks.iter().enumerate() {
                let w = r[(j, k)].max(1e-12);
                let mut v = dc.view_mut((off[j], off[j]), (t.len(), t.len()));
                v += &dkh[j] / w;
            }
            let outer = &cen.alpha * cen.alpha.transpose() - &cen.c_inv;
            g += 0.5 * (outer.component_mul(&dc)).sum();
            if trace {
                let q = &cen.knz * pk * cen.knz.transpose();
                for (j, t) in tasks.iter().enumerate() {
                    let nj = t.len();
                    let kjj = k_se(f, t.x(), t.x());
                    let resid = kjj - q.view((off[j], off[j]), (nj, nj));
                    let dresid = &dkjj[j] - dq.view((off[j], off[j]), (nj, nj));
                    let t1 = (dresid * &kh_inv[j]).trace();
                    let t2 = (resid * &kh_inv[j] * &dkh[j] * &kh_inv[j]).trace();
                    g -= 0.5 * r[(j, k)] * (t1 - t2);
                }
            }
        }
        grad.push((coord, g));
    }
    (value, Some(grad))
}

/// Responsibility-weighted optimal posterior of one center, dense form.
pub fn dense_posterior(
    tasks: &[Task],
    rk: &[f64],
    fixed: &SeKernelParams,
    z: &DMatrix<f64>,
    h: &Hyperparams,
) -> (DVector<f64>, DMatrix<f64>) {
    let kzz = k_se(fixed, z, z);
    let mut phi = kzz.clone();
    let mut rhs = DVector::zeros(z.nrows());
    for (t, &r) in tasks.iter().zip(rk) {
        let kzj = k_se(fixed, z, t.x());
        let ki = inv(&khat(h, t));
        phi += &kzj * &ki * kzj.transpose() * r;
        rhs += &kzj * &ki * t.y() * r;
    }
    let phi_inv = inv(&phi);
    (&kzz * &phi_inv * rhs, &kzz * &phi_inv * &kzz)
}

/// Exact predictive of `f^j(x*)` (latent, noise-free) by conditioning the
/// full joint Gaussian.
pub fn dense_direct_predict(
    tasks: &[Task],
    h: &Hyperparams,
    j: usize,
    xs: &DMatrix<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let x = stack_x(tasks);
    let off = offsets(tasks);
    let mut c = k_se(&h.fixed[0], &x, &x);
    for (i, t) in tasks.iter().enumerate() {
        let mut v = c.view_mut((off[i], off[i]), (t.len(), t.len()));
        v += khat(h, t);
    }
    let mut kx = k_se(&h.fixed[0], xs, &x);
    let kr = k_se(&h.random, xs, tasks[j].x());
    let mut v = kx.view_mut((0, off[j]), (xs.nrows(), tasks[j].len()));
    v += kr;
    let ci = inv(&c);
    let y = stack_y(tasks);
    let mean = &kx * &ci * y;
    let kss = k_se(&h.fixed[0], xs, xs) + k_se(&h.random, xs, xs);
    let cov = kss - &kx * &ci * kx.transpose();
    (
        mean.iter().copied().collect(),
        cov.diagonal().iter().copied().collect(),
    )
}

pub fn uniform_points<R: Rng>(rng: &mut R, n: usize, d: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random_range(lo..hi))
}

/// Points with pairwise distance at least `sep` (rejection sampling).
pub fn separated_points<R: Rng>(
    rng: &mut R,
    n: usize,
    d: usize,
    lo: f64,
    hi: f64,
    sep: f64,
) -> DMatrix<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < n {
        let p: Vec<f64> = (0..d).map(|_| rng.random_range(lo..hi)).collect();
        let ok = rows.iter().all(|q| {
            q.iter()
                .zip(&p)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                >= sep
        });
        if ok {
            rows.push(p);
        }
    }
    DMatrix::from_fn(n, d, |i, r| rows[i][r])
}

pub fn random_kernel<R: Rng>(
    rng: &mut R,
    d: usize,
    s2: (f64, f64),
    l: (f64, f64),
) -> SeKernelParams {
    let ls: Vec<f64> = (0..d).map(|_| rng.random_range(l.0..l.1)).collect();
    SeKernelParams::new(rng.random_range(s2.0..s2.1), &ls)
}

/// Random tasks with `n_tasks` tasks of 1..=`max_n` points each. Targets
/// are smooth-ish functions plus noise so the bound is in a sane range.
pub fn random_tasks<R: Rng>(
    rng: &mut R,
    n_tasks: usize,
    max_n: usize,
    d: usize,
    per_task_noise: bool,
) -> Vec<Task> {
    (0..n_tasks)
        .map(|_| {
            let n = rng.random_range(1..=max_n);
            let x = uniform_points(rng, n, d, -3.0, 3.0);
            let shift = rng.random_range(-0.5..0.5);
            let y = DVector::from_fn(n, |i, _| {
                (0..d).map(|r| x[(i, r)].sin()).sum::<f64>()
                    + shift
                    + 0.3 * rng.random_range(-1.0..1.0)
            });
            let noise = if per_task_noise && rng.random_bool(0.5) {
                Some(rng.random_range(0.05..0.5))
            } else {
                None
            };
            Task::with_noise(x, y, noise).unwrap()
        })
        .collect()
}

pub fn random_hyper<R: Rng>(
    rng: &mut R,
    d: usize,
    n_fixed: usize,
    zero_random: bool,
    per_task: bool,
) -> Hyperparams {
    let fixed = (0..n_fixed)
        .map(|_| random_kernel(rng, d, (0.5, 2.0), (0.6, 1.5)))
        .collect();
    let random = if zero_random {
        SeKernelParams::zero(d)
    } else {
        random_kernel(rng, d, (0.1, 0.6), (0.5, 1.5))
    };
    let mut noise = NoiseParams::shared(rng.random_range(0.05..0.4));
    noise.per_task = per_task;
    Hyperparams {
        fixed,
        random,
        noise,
    }
}

pub fn random_inducing<R: Rng>(rng: &mut R, m: usize, d: usize) -> InducingSet {
    InducingSet::new(separated_points(rng, m, d, -3.0, 3.0, 0.5), true).unwrap()
}

/// Random responsibilities with every entry at least `floor`.
pub fn random_r<R: Rng>(rng: &mut R, m: usize, k: usize, floor: f64) -> Responsibilities {
    let mut r = DMatrix::from_fn(m, k, |_, _| floor + rng.random_range(0.0..1.0));
    for j in 0..m {
        let s: f64 = r.row(j).sum();
        for c in 0..k {
            r[(j, c)] /= s;
        }
    }
    Responsibilities::new(r).unwrap()
}

/// Relative difference `‖a − b‖∞ / ‖b‖∞`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Central finite difference of `f` along one coordinate.
pub fn central_diff<F: FnMut(&ModelParams) -> f64>(
    mut f: F,
    p: &ModelParams,
    c: Coord,
    h: f64,
) -> f64 {
    let v = p.get(c).unwrap();
    let mut q = p.clone();
    q.set(c, v + h).unwrap();
    let up = f(&q);
    q.set(c, v - h).unwrap();
    let down = f(&q);
    (up - down) / (2.0 * h)
}

/// Mean and standard error of a sample.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Fills `out` with i.i.d. standard normals.
pub fn normals<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    use rand_distr::StandardNormal;
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Lower Cholesky factor of a PSD matrix, with a tiny ridge for
/// numerically singular inputs.
pub fn chol_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let scale = m
        .diagonal()
        .iter()
        .fold(0.0f64, |a, b| a.max(b.abs()))
        .max(1e-300);
    let mut eps = 0.0;
    loop {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += eps;
        }
        if let Some(c) = a.cholesky() {
            return c.unpack();
        }
        eps = if eps == 0.0 {
            1e-14 * scale
        } else {
            eps * 10.0
        };
    }
}

/// All permutations of `0..k`.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Fraction of `pred` matching `truth` under the best relabelling.
pub fn permuted_accuracy(pred: &[usize], truth: &[usize], k: usize) -> (f64, Vec<usize>) {
    permutations(k)
        .into_iter()
        .map(|perm| {
            let hits = pred
                .iter()
                .zip(truth)
                .filter(|(p, t)| perm[**p] == **t)
                .count();
            (hits as f64 / pred.len() as f64, perm)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap()
}
