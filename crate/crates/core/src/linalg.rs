//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Reciprocal condition numbers below this are treated as singular.
pub const RCOND_MIN: f64 = 1e-12;

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Inverse by LU with partial pivoting. `node` only labels the error.
pub fn inverse_at(m: &DMatrix<f64>, node: usize) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("cannot invert a {}x{} matrix", m.nrows(), m.ncols())));
    }
    let inv = m.clone().lu().try_inverse().ok_or(Error::Singular { node, rcond: 0.0 })?;
    let rcond = 1.0 / (norm1(m) * norm1(&inv));
    if !(rcond >= RCOND_MIN) {
        return Err(Error::Singular { node, rcond });
    }
    Ok(inv)
}

pub fn inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    inverse_at(m, 0)
}

/// Checks symmetry and runs a Cholesky factorisation.
pub fn require_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NotPositiveDefinite { name: name.into(), reason: "not square".into() });
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::NotPositiveDefinite { name: name.into(), reason: "not symmetric".into() });
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite {
            name: name.into(),
            reason: "Cholesky factorisation failed".into(),
        });
    }
    Ok(())
}

/// Symmetric matrix function through the eigendecomposition.
fn sym_fn(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Principal square root of a symmetric positive definite matrix.
pub fn spd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_fn(m, f64::sqrt)
}

/// Inverse principal square root of a symmetric positive definite matrix.
pub fn spd_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_fn(m, |x| 1.0 / x.sqrt())
}

/// Operator 2-norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical rank: singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = singular_values(m);
    match sv.first() {
        Some(&smax) if smax > 0.0 => sv.iter().filter(|&&s| s > rel_tol * smax).count(),
        _ => 0,
    }
}

/// Least-squares solution of `m·x = b` via the SVD, truncating singular
/// values below `rel_tol · σ_max`.
pub fn lstsq(m: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> Result<DVector<f64>> {
    if m.nrows() != b.len() {
        return Err(Error::Dimension(format!("{} rows vs rhs of length {}", m.nrows(), b.len())));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = rel_tol * smax;
    svd.solve(b, eps).map_err(|e| Error::Usage(e.to_string()))
}

/// `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
