//! Small dense linear-algebra helpers shared by the analysis and estimation modules.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

/// Matrices up to this order get a full eigendecomposition in [`spectral_radius`].
pub const FULL_EIG_LIMIT: usize = 256;

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-stacking vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`] for a square `n × n` matrix.
pub fn unvec(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, v.as_slice())
}

/// Extends an `N × N` matrix to `A ⊗ I_M`.
pub fn extend(a: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    kron(a, &DMatrix::identity(m, m))
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
        off += b.nrows();
    }
    out
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && max_asymmetry(m) <= tol
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn max_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// Symmetric square root `Q Λ^{1/2} Qᵀ` of a positive-definite matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Validation(
            "covariance is not positive-definite".into(),
        ));
    }
    let root = eig.eigenvalues.map(f64::sqrt);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Symmetric square root of a nonnegative-definite matrix; tiny negative
/// eigenvalues from rounding are clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let scale = s.amax().max(1.0);
    let eig = SymmetricEigen::new(s);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(Error::Validation(
            "covariance is not nonnegative-definite".into(),
        ));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Eigenvalues of a general real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<nalgebra::Complex<f64>>> {
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Numerical("eigensolver did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// Largest eigenvalue magnitude.
///
/// Full eigendecomposition up to [`FULL_EIG_LIMIT`]; above it the growth
/// rate of repeated squaring, `ρ = lim ‖A^{2^k}‖^{1/2^k}`.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::Numerical("non-finite matrix entry".into()));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    if m.nrows() <= FULL_EIG_LIMIT {
        if is_symmetric(m, 0.0) {
            let ev = sym_eigenvalues(m);
            return Ok(ev.iter().fold(0.0_f64, |a, x| a.max(x.abs())));
        }
        let ev = eigenvalues(m)?;
        return Ok(ev.iter().fold(0.0_f64, |a, z| a.max(z.norm())));
    }
    Ok(squaring_radius(m, 48))
}

pub(crate) fn squaring_radius(m: &DMatrix<f64>, rounds: u32) -> f64 {
    let n0 = m.norm();
    if n0 == 0.0 {
        return 0.0;
    }
    let mut log_norm = n0.ln();
    let mut cur = m / n0;
    let mut power = 1.0_f64;
    for _ in 0..rounds {
        let sq = &cur * &cur;
        let s = sq.norm();
        if s == 0.0 {
            return 0.0;
        }
        log_norm = 2.0 * log_norm + s.ln();
        power *= 2.0;
        cur = sq / s;
    }
    (log_norm / power).exp()
}

/// Block `k` of a stacked vector with blocks of length `m`.
#[inline]
pub fn block(v: &DVector<f64>, k: usize, m: usize) -> nalgebra::DVectorView<'_, f64> {
    v.rows(k * m, m)
}

pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // Tr(AB) = Σ_ij A_ij B_ji
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}
