//! Small dense helpers shared by the structured algorithms. Everything here
//! operates on K x K or (B+1) x (B+1) matrices, never on D x D ones.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorization of a symmetric positive-definite matrix. The input
/// is symmetrized first; failure is reported with diagnostics, never patched.
pub(crate) fn cholesky(m: &DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    let sym = symmetrize(m);
    let n = sym.nrows();
    Cholesky::new(sym.clone()).ok_or_else(|| {
        let min_diag = sym.diagonal().iter().copied().fold(f64::INFINITY, f64::min);
        let max_abs = sym.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let non_finite = sym.iter().filter(|v| !v.is_finite()).count();
        Error::Factorization {
            context,
            size: n,
            min_diag,
            max_abs,
            non_finite,
        }
    })
}

pub(crate) fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Sum of the elementwise product, i.e. tr(AᵀB).
pub(crate) fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Row-wise dot products of two matrices with equal shape.
pub(crate) fn row_dots(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.nrows());
    for (ca, cb) in a.column_iter().zip(b.column_iter()) {
        for i in 0..a.nrows() {
            out[i] += ca[i] * cb[i];
        }
    }
    out
}

/// Row-wise squared norms.
pub(crate) fn row_sq_norms(a: &DMatrix<f64>) -> DVector<f64> {
    row_dots(a, a)
}

/// Scales row i of `m` by `s[i]`.
pub(crate) fn scale_rows(m: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        col.component_mul_assign(s);
    }
    out
}

/// Eigendecomposition of the symmetrized input.
pub(crate) fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

/// Rebuilds V f(Λ) Vᵀ from an eigendecomposition.
pub(crate) fn eigen_apply(eig: &SymmetricEigen<f64, Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(eig.eigenvalues[j]);
    }
    &scaled * v.transpose()
}
