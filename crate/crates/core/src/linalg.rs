//! Dense linear algebra for the block structures of the mixed-effect model.
//!
//! Everything is solved through Cholesky factors; no explicit inverses are
//! formed except where a caller asks for one.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter levels tried in order, as multiples of the mean diagonal.
pub const DEFAULT_JITTER_SCHEDULE: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Smallest accepted squared pivot, relative to the mean diagonal. A
/// factorization that completes with smaller pivots is numerically singular
/// and its solves are garbage, so the next jitter level is tried instead.
const PIVOT_FLOOR: f64 = 1e-11;

const SYMMETRY_TOL: f64 = 1e-10;
const BLOCK_SYMMETRY_TOL: f64 = 1e-12;

/// Escalation schedule for diagonal jitter.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterPolicy {
    /// Relative levels (multiples of the mean diagonal), tried in order.
    pub schedule: Vec<f64>,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            schedule: DEFAULT_JITTER_SCHEDULE.to_vec(),
        }
    }
}

impl JitterPolicy {
    /// Only try the matrix as given.
    pub fn exact() -> Self {
        JitterPolicy {
            schedule: vec![0.0],
        }
    }
}

/// Lower-triangular Cholesky factor of a (possibly jittered) SPD matrix.
#[derive(Clone, Debug)]
pub struct CholFactor {
    l: DMatrix<f64>,
    jitter: f64,
}

/// Factor `mat + j I` for the smallest `j` in the policy that succeeds.
pub fn chol(mat: &DMatrix<f64>, policy: &JitterPolicy) -> Result<CholFactor> {
    if !mat.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of non-square {}x{} matrix",
            mat.nrows(),
            mat.ncols()
        )));
    }
    let n = mat.nrows();
    let scale = mat.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((mat[(i, j)] - mat[(j, i)]).abs());
        }
    }
    if asym > SYMMETRY_TOL * scale || asym.is_nan() {
        return Err(Error::NonSymmetric { asymmetry: asym });
    }
    let mean_diag = if n == 0 {
        1.0
    } else {
        let m = mat.diagonal().sum() / n as f64;
        if m > 0.0 && m.is_finite() {
            m
        } else {
            1.0
        }
    };
    let mut last = 0.0;
    for &rel in &policy.schedule {
        let jitter = rel * mean_diag;
        last = jitter;
        if let Some(l) = try_factor(mat, jitter, PIVOT_FLOOR * mean_diag) {
            return Ok(CholFactor { l, jitter });
        }
    }
    Err(Error::NotPositiveDefinite {
        max_jitter: last,
        context: String::new(),
    })
}

/// Factor `mat + jitter I` at exactly the given absolute jitter.
pub fn chol_at(mat: &DMatrix<f64>, jitter: f64) -> Result<CholFactor> {
    try_factor(mat, jitter, 0.0)
        .map(|l| CholFactor { l, jitter })
        .ok_or(Error::NotPositiveDefinite {
            max_jitter: jitter,
            context: String::new(),
        })
}

fn try_factor(mat: &DMatrix<f64>, jitter: f64, floor: f64) -> Option<DMatrix<f64>> {
    let mut m = symmetrize(mat);
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    let l = m.cholesky()?.unpack();
    if l.diagonal().iter().all(|d| d * d >= floor && d.is_finite()) {
        Some(l)
    } else {
        None
    }
}

impl CholFactor {
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Absolute jitter added to the diagonal before factorizing.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `L Lᵀ`, i.e. the jittered input.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// Factor of `c · A` for `c > 0`.
    pub fn scaled(&self, c: f64) -> CholFactor {
        CholFactor {
            l: &self.l * c.sqrt(),
            jitter: self.jitter * c,
        }
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L⁻¹ B`
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_lower_mut(&mut x);
        x
    }

    fn solve_lower_mut(&self, x: &mut DMatrix<f64>) {
        let ok = self.l.solve_lower_triangular_mut(x);
        debug_assert!(ok);
    }

    fn solve_upper_mut(&self, x: &mut DMatrix<f64>) {
        let ok = self.l.tr_solve_lower_triangular_mut(x);
        debug_assert!(ok);
    }

    /// `L⁻ᵀ B`
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_upper_mut(&mut x);
        x
    }

    /// `A⁻¹ B`
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_lower_mut(&mut x);
        self.solve_upper_mut(&mut x);
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        let x = self.solve(&m);
        DVector::from_column_slice(x.as_slice())
    }

    /// `A⁻¹ = L⁻ᵀ L⁻¹`, with `L⁻¹` built column by column (each column of
    /// `L⁻¹` is zero above the diagonal).
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let l = &self.l;
        let mut li = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut x = li.column_mut(j);
            x[j] = 1.0;
            for k in j..n {
                let xk = x[k] / l[(k, k)];
                x[k] = xk;
                if xk != 0.0 {
                    x.rows_mut(k + 1, n - k - 1).axpy(
                        -xk,
                        &l.column(k).rows(k + 1, n - k - 1),
                        1.0,
                    );
                }
            }
        }
        symmetrize(&li.tr_mul(&li))
    }

    /// `Tr(A⁻¹ B)` without forming `A⁻¹`.
    pub fn trace_solve(&self, b: &DMatrix<f64>) -> f64 {
        self.solve(b).trace()
    }
}

/// `(M + Mᵀ) / 2`
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Block-diagonal matrix of square symmetric blocks.
#[derive(Clone, Debug)]
pub struct BlockDiag {
    blocks: Vec<DMatrix<f64>>,
    offsets: Vec<usize>,
}

impl BlockDiag {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(blocks.len() + 1);
        let mut total = 0;
        offsets.push(0);
        for (b, blk) in blocks.iter().enumerate() {
            if !blk.is_square() {
                return Err(Error::DimensionMismatch(format!("block {b} is not square")));
            }
            let n = blk.nrows();
            for i in 0..n {
                for j in 0..i {
                    let a = (blk[(i, j)] - blk[(j, i)]).abs();
                    if a > BLOCK_SYMMETRY_TOL {
                        return Err(Error::NonSymmetric { asymmetry: a });
                    }
                }
            }
            total += n;
            offsets.push(total);
        }
        Ok(BlockDiag { blocks, offsets })
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (b, blk) in self.blocks.iter().enumerate() {
            let o = self.offsets[b];
            out.view_mut((o, o), blk.shape()).copy_from(blk);
        }
        out
    }

    pub fn factor(&self, policy: &JitterPolicy) -> Result<FactoredBlockDiag> {
        let factors = self
            .blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| chol(blk, policy).map_err(|e| e.with_context(format!("block {b}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(FactoredBlockDiag::from_factors(factors))
    }
}

/// Per-block Cholesky factors of a block-diagonal matrix.
#[derive(Clone, Debug)]
pub struct FactoredBlockDiag {
    factors: Vec<CholFactor>,
    offsets: Vec<usize>,
}

impl FactoredBlockDiag {
    pub fn from_factors(factors: Vec<CholFactor>) -> Self {
        let mut offsets = Vec::with_capacity(factors.len() + 1);
        offsets.push(0);
        let mut total = 0;
        for f in &factors {
            total += f.dim();
            offsets.push(total);
        }
        FactoredBlockDiag { factors, offsets }
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn factors(&self) -> &[CholFactor] {
        &self.factors
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn logdet(&self) -> f64 {
        self.factors.iter().map(CholFactor::logdet).sum()
    }

    /// Blockwise `B⁻¹ R`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for (b, f) in self.factors.iter().enumerate() {
            let o = self.offsets[b];
            let n = f.dim();
            let part = f.solve(&rhs.rows(o, n).into_owned());
            out.rows_mut(o, n).copy_from(&part);
        }
        out
    }
}

/// Factorized `Λ K⁻¹ Λᵀ + B` with `B` block diagonal, via the matrix
/// inversion lemma. Cost `O(Σ N_j³ + m³ + N m²)`; the `N × N` inverse is
/// never formed.
#[derive(Clone, Debug)]
pub struct Woodbury {
    blocks: FactoredBlockDiag,
    /// `B⁻¹ Λ`
    p: DMatrix<f64>,
    /// Cholesky of `K + Λᵀ B⁻¹ Λ`
    inner: CholFactor,
    logdet: f64,
}

impl Woodbury {
    pub fn new(
        blocks: FactoredBlockDiag,
        lambda: &DMatrix<f64>,
        kmm: &CholFactor,
        policy: &JitterPolicy,
    ) -> Result<Self> {
        if lambda.nrows() != blocks.dim() || lambda.ncols() != kmm.dim() {
            return Err(Error::DimensionMismatch(format!(
                "lambda is {}x{}, blocks {} and kmm {}",
                lambda.nrows(),
                lambda.ncols(),
                blocks.dim(),
                kmm.dim()
            )));
        }
        let p = blocks.solve(lambda);
        let inner_mat = symmetrize(&(kmm.reconstruct() + lambda.transpose() * &p));
        let inner =
            chol(&inner_mat, policy).map_err(|e| e.with_context("woodbury inner matrix"))?;
        let logdet = inner.logdet() - kmm.logdet() + blocks.logdet();
        Ok(Woodbury {
            blocks,
            p,
            inner,
            logdet,
        })
    }

    pub fn blocks(&self) -> &FactoredBlockDiag {
        &self.blocks
    }

    /// `B⁻¹ Λ`
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Factor of `K + Λᵀ B⁻¹ Λ`.
    pub fn inner(&self) -> &CholFactor {
        &self.inner
    }

    /// `log |Λ K⁻¹ Λᵀ + B|` by the matrix determinant lemma.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn apply_inverse(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let binv = self.blocks.solve(rhs);
        let t = self.inner.solve(&(self.p.transpose() * rhs));
        binv - &self.p * t
    }

    pub fn apply_inverse_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        DVector::from_column_slice(self.apply_inverse(&m).as_slice())
    }

    /// Diagonal block `b` of the inverse: `B_b⁻¹ − P_b A⁻¹ P_bᵀ`.
    pub fn inverse_diag_block(&self, b: usize) -> DMatrix<f64> {
        let f = &self.blocks.factors()[b];
        let o = self.blocks.offsets()[b];
        let n = f.dim();
        let pb = self.p.rows(o, n).into_owned();
        let t = self.inner.solve(&pb.transpose());
        symmetrize(&(f.inverse() - &pb * t))
    }
}

/// `(Λ K⁻¹ Λᵀ + B)⁻¹ · rhs`
pub fn woodbury_inverse_apply(
    blocks: &BlockDiag,
    lambda: &DMatrix<f64>,
    kmm: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    policy: &JitterPolicy,
) -> Result<DMatrix<f64>> {
    if rhs.nrows() != blocks.dim() {
        return Err(Error::DimensionMismatch(format!(
            "rhs has {} rows, system has {}",
            rhs.nrows(),
            blocks.dim()
        )));
    }
    let kf = chol(kmm, policy).map_err(|e| e.with_context("K_mm"))?;
    let w = Woodbury::new(blocks.factor(policy)?, lambda, &kf, policy)?;
    Ok(w.apply_inverse(rhs))
}

/// `log |Λ K⁻¹ Λᵀ + B|`
pub fn logdet_woodbury(
    blocks: &BlockDiag,
    lambda: &DMatrix<f64>,
    kmm: &DMatrix<f64>,
    policy: &JitterPolicy,
) -> Result<f64> {
    let kf = chol(kmm, policy).map_err(|e| e.with_context("K_mm"))?;
    Ok(Woodbury::new(blocks.factor(policy)?, lambda, &kf, policy)?.logdet())
}

/// `Σ_ab A_ab B_ab`
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
