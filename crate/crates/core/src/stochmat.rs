//! Stochastic matrices: classification, regularity, spectral quantities and
//! the block maximum norm.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::linalg;

pub use crate::linalg::spectral_radius;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    LeftStochastic,
    RightStochastic,
    DoublyStochastic,
}

/// Nonnegative weights supported on a topology, tagged with the stochastic kind they satisfy.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationMatrix {
    entries: DMatrix<f64>,
    kind: Kind,
    tol: f64,
}

pub const DEFAULT_TOL: f64 = 1e-9;

impl CombinationMatrix {
    pub fn new(entries: DMatrix<f64>, kind: Kind, t: &Topology, tol: f64) -> Result<Self> {
        let n = t.n();
        if entries.shape() != (n, n) {
            return Err(Error::Validation(format!(
                "combination matrix is {:?}, topology has {n} nodes",
                entries.shape()
            )));
        }
        for l in 0..n {
            for k in 0..n {
                let x = entries[(l, k)];
                if !t.in_neighborhood(l, k) && x != 0.0 {
                    return Err(Error::Validation(format!(
                        "weight ({l},{k}) = {x} outside the neighborhood of node {k}"
                    )));
                }
            }
        }
        let kinds = classify_stochastic(&entries, tol);
        if !kinds.contains(&kind) {
            return Err(Error::Validation(format!(
                "matrix is not {kind:?} within {tol:e} (classified as {kinds:?})"
            )));
        }
        Ok(Self { entries, kind, tol })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: DMatrix::identity(n, n),
            kind: Kind::DoublyStochastic,
            tol: DEFAULT_TOL,
        }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }
}

/// Every kind whose defining sums hold within `tol` with entries ≥ −tol.
pub fn classify_stochastic(x: &DMatrix<f64>, tol: f64) -> Vec<Kind> {
    if !x.is_square() || x.iter().any(|&v| !(v >= -tol)) {
        return Vec::new();
    }
    let n = x.nrows();
    let cols = (0..n).all(|k| (x.column(k).sum() - 1.0).abs() <= tol);
    let rows = (0..n).all(|k| (x.row(k).sum() - 1.0).abs() <= tol);
    let mut out = Vec::new();
    if cols {
        out.push(Kind::LeftStochastic);
    }
    if rows {
        out.push(Kind::RightStochastic);
    }
    if cols && rows {
        out.push(Kind::DoublyStochastic);
    }
    out
}

pub fn is_kind(x: &DMatrix<f64>, kind: Kind, tol: f64) -> bool {
    classify_stochastic(x, tol).contains(&kind)
}

/// Smallest `j₀ ≤ (N−1)²+1` with `A^{j₀}` entrywise positive, if any.
pub fn is_regular(a: &DMatrix<f64>) -> Option<usize> {
    let n = a.nrows();
    if n == 0 {
        return None;
    }
    let cap = (n - 1) * (n - 1) + 1;
    let mut p = a.clone();
    for j in 1..=cap {
        let mx = p.amax();
        if mx == 0.0 {
            return None;
        }
        p /= mx;
        if p.iter().all(|&v| v > 1e-12) {
            return Some(j);
        }
        p = &p * a;
    }
    None
}

/// `|λ₂(A)|`: largest eigenvalue magnitude once one eigenvalue at 1 is removed.
pub fn second_eigenvalue_magnitude(a: &DMatrix<f64>, tol: f64) -> Result<f64> {
    if !is_kind(a, Kind::DoublyStochastic, tol) {
        return Err(Error::Precondition(
            "second eigenvalue magnitude needs a doubly stochastic matrix".into(),
        ));
    }
    let ev = linalg::eigenvalues(a)?;
    if ev.len() <= 1 {
        return Ok(0.0);
    }
    let one = ev
        .iter()
        .enumerate()
        .min_by(|(_, x), (_, y)| {
            let dx = (*x - nalgebra::Complex::new(1.0, 0.0)).norm();
            let dy = (*y - nalgebra::Complex::new(1.0, 0.0)).norm();
            dx.total_cmp(&dy)
        })
        .map(|(i, _)| i)
        .unwrap();
    Ok(ev
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != one)
        .fold(0.0_f64, |m, (_, z)| m.max(z.norm())))
}

/// `max_k ‖x_k‖` over blocks of length `m`.
pub fn block_max_norm(x: &DVector<f64>, m: usize) -> f64 {
    assert!(m > 0 && x.len() % m == 0, "vector length must be a multiple of the block size");
    (0..x.len() / m)
        .map(|k| linalg::block(x, k, m).norm())
        .fold(0.0, f64::max)
}

/// Induced block maximum norm of `A ⊗ I_M`: the maximum absolute row sum of `A`.
pub fn block_max_norm_kron(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Induced block maximum norm of a block-diagonal matrix with symmetric blocks: `max_k ρ(D_k)`.
pub fn block_max_norm_blockdiag(blocks: &[DMatrix<f64>]) -> Result<f64> {
    let mut best: f64 = 0.0;
    for (k, d) in blocks.iter().enumerate() {
        if !linalg::is_symmetric(d, 1e-12 * d.amax().max(1.0)) {
            return Err(Error::Precondition(format!("block {k} is not symmetric")));
        }
        best = best.max(linalg::spectral_radius(d)?);
    }
    Ok(best)
}

/// Bracket `max‖A_ℓk‖ ≤ ‖A‖_{b,∞} ≤ N·max‖A_ℓk‖` for a general block matrix,
/// with blocks measured in the spectral norm.
pub fn block_max_norm_bounds(a: &DMatrix<f64>, m: usize) -> (f64, f64) {
    let n = a.nrows() / m;
    let mut mx: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let b = a.view((i * m, j * m), (m, m)).clone_owned();
            let s = b.singular_values().iter().fold(0.0_f64, |x, &y| x.max(y));
            mx = mx.max(s);
        }
    }
    (mx, n as f64 * mx)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Compares `ρ(A2ᵀ D A1ᵀ)` (block-extended) with `max_k ρ(D_k)`.
pub fn transformed_block_spectral_check(
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    d_blocks: &[DMatrix<f64>],
    tol: f64,
) -> Result<SpectralCheck> {
    let n = d_blocks.len();
    if a1.shape() != (n, n) || a2.shape() != (n, n) {
        return Err(Error::Precondition("dimension mismatch".into()));
    }
    for (name, a) in [("A1", a1), ("A2", a2)] {
        if !is_kind(a, Kind::LeftStochastic, 1e-9) {
            return Err(Error::Precondition(format!("{name} is not left-stochastic")));
        }
    }
    let m = d_blocks.first().map_or(1, |d| d.nrows());
    let rhs = block_max_norm_blockdiag(d_blocks)?;
    let d = linalg::block_diag(d_blocks);
    let prod = linalg::extend(&a2.transpose(), m) * d * linalg::extend(&a1.transpose(), m);
    let lhs = linalg::spectral_radius(&prod)?;
    let holds = lhs <= rhs + tol;
    if !holds {
        return Err(Error::Internal(format!(
            "block spectral bound violated: {lhs} > {rhs} + {tol:e}"
        )));
    }
    Ok(SpectralCheck { lhs, rhs, holds })
}

/// Alternating row/column normalization of a positive matrix toward doubly stochastic form.
pub fn sinkhorn(mut x: DMatrix<f64>, iters: usize) -> DMatrix<f64> {
    for _ in 0..iters {
        for mut r in x.row_iter_mut() {
            let s: f64 = r.sum();
            r /= s;
        }
        for mut c in x.column_iter_mut() {
            let s: f64 = c.sum();
            c /= s;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m2(v: [f64; 4]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &v)
    }

    #[test]
    fn classify_examples() {
        use Kind::*;
        assert_eq!(
            classify_stochastic(&m2([0.5, 0.5, 0.5, 0.5]), 1e-12),
            vec![LeftStochastic, RightStochastic, DoublyStochastic]
        );
        assert_eq!(classify_stochastic(&m2([1.0, 0.0, 0.3, 0.7]), 1e-12), vec![RightStochastic]);
        assert_eq!(classify_stochastic(&DMatrix::identity(3, 3), 1e-12).len(), 3);
        assert!(classify_stochastic(&m2([1.5, -0.5, 0.0, 1.0]), 1e-12).is_empty());
    }

    #[test]
    fn regularity_examples() {
        assert_eq!(is_regular(&m2([0.5, 0.5, 0.5, 0.5])), Some(1));
        assert_eq!(is_regular(&m2([0.0, 1.0, 1.0, 0.0])), None);
        assert_eq!(is_regular(&DMatrix::identity(3, 3)), None);
        let path = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.0, 0.5, 0.0, 0.5, 0.0, 0.5, 0.5]);
        assert_eq!(is_regular(&path), Some(2));
    }

    #[test]
    fn spectral_radius_examples() {
        assert_abs_diff_eq!(spectral_radius(&m2([1.0, 0.0, 0.3, 0.7])).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spectral_radius(&m2([2.0, 0.0, 0.0, 1.0])).unwrap(), 2.0, epsilon = 0.0);
        assert_eq!(spectral_radius(&DMatrix::zeros(3, 3)).unwrap(), 0.0);
    }

    #[test]
    fn second_eigenvalue_examples() {
        let avg = DMatrix::from_element(4, 4, 0.25);
        assert_abs_diff_eq!(second_eigenvalue_magnitude(&avg, 1e-12).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            second_eigenvalue_magnitude(&DMatrix::identity(2, 2), 1e-12).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert!(second_eigenvalue_magnitude(&m2([1.0, 0.0, 0.3, 0.7]), 1e-12).is_err());
    }

    #[test]
    fn block_norm_examples() {
        let x = DVector::from_vec(vec![3.0, 4.0, 1.0, 0.0]);
        assert_eq!(block_max_norm(&x, 2), 5.0);
        assert_eq!(block_max_norm_kron(&m2([1.0, -2.0, 0.5, 0.5])), 3.0);
        let d = [DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 1.0)];
        assert_eq!(block_max_norm_blockdiag(&d).unwrap(), 2.0);
        let bad = [m2([1.0, 2.0, 0.0, 1.0])];
        assert!(matches!(block_max_norm_blockdiag(&bad), Err(Error::Precondition(_))));
    }

    #[test]
    fn worked_transform_example() {
        let a = m2([1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0]);
        let d = [DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 1.0)];
        let c = transformed_block_spectral_check(&a, &a, &d, 1e-10).unwrap();
        assert_eq!(c.rhs, 2.0);
        assert!((c.lhs - 1.52).abs() < 0.01);
        assert!(c.holds);
    }

    #[test]
    fn identity_transform_is_tight() {
        let d = [m2([0.5, 0.1, 0.1, 0.3]), m2([0.9, 0.0, 0.0, -0.2])];
        let i = DMatrix::identity(2, 2);
        let c = transformed_block_spectral_check(&i, &i, &d, 1e-10).unwrap();
        assert_abs_diff_eq!(c.lhs, c.rhs, epsilon = 1e-14);
    }

    #[test]
    fn bracket_bounds_contain_kron_norm() {
        let a = m2([0.2, 0.8, 0.6, 0.4]);
        let big = linalg::extend(&a, 2);
        let (lo, hi) = block_max_norm_bounds(&big, 2);
        let exact = block_max_norm_kron(&a);
        assert!(lo <= exact + 1e-12 && exact <= hi + 1e-12);
    }

    #[test]
    fn sinkhorn_gives_doubly_stochastic() {
        let x = DMatrix::from_fn(4, 4, |i, j| 1.0 + ((i * 3 + j) % 4) as f64);
        let d = sinkhorn(x, 500);
        assert!(is_kind(&d, Kind::DoublyStochastic, 1e-12));
    }

    #[test]
    fn combination_matrix_support() {
        let t = Topology::path(3);
        let ok = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.0, 0.5, 0.0, 0.5, 0.0, 0.5, 0.5]);
        assert!(CombinationMatrix::new(ok, Kind::DoublyStochastic, &t, 1e-12).is_ok());
        let bad = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.5, 0.0, 1.0, 0.0, 0.5, 0.0, 0.5]);
        assert!(CombinationMatrix::new(bad, Kind::DoublyStochastic, &t, 1e-12).is_err());
    }
}
