//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Solve `A X = B` by partial-pivoting LU. `None` if `A` is singular.
pub fn lu_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let lu = a.clone().lu();
    let x = lu.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn lu_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.clone().lu();
    let x = lu.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// `(log|det A|, sign det A)` from a pivoted LU factorization. A zero pivot
/// gives `(-inf, 0)`.
pub fn log_abs_det(a: &DMatrix<f64>) -> (f64, f64) {
    assert!(a.is_square());
    let lu = a.clone().lu();
    let mut sign: f64 = lu.p().determinant();
    let mut log = 0.0;
    let u = lu.u();
    for i in 0..a.nrows() {
        let d = u[(i, i)];
        if d == 0.0 || !d.is_finite() {
            return (f64::NEG_INFINITY, 0.0);
        }
        log += d.abs().ln();
        sign *= d.signum();
    }
    (log, sign)
}

/// Least-squares solution of `X b ≈ y` via SVD.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = x.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-13;
    let b = svd.solve(y, tol).ok()?;
    b.iter().all(|v| v.is_finite()).then_some(b)
}

/// Inverse of a symmetric positive-definite matrix; falls back to LU.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return Some(ch.inverse());
    }
    let inv = sym.try_inverse()?;
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

/// Indices of a maximal set of linearly independent columns, chosen greedily
/// left to right by modified Gram-Schmidt on unit-normalized columns.
pub fn independent_columns(z: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for c in 0..z.ncols() {
        let col = z.column(c).into_owned();
        let norm = col.norm();
        if norm == 0.0 || !norm.is_finite() {
            continue;
        }
        let mut v = col / norm;
        // two passes of projection for numerical orthogonality
        for _ in 0..2 {
            for q in &basis {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let r = v.norm();
        if r > tol {
            basis.push(v / r);
            keep.push(c);
        }
    }
    keep
}

pub fn select_columns(z: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(z.nrows(), cols.len(), |r, c| z[(r, cols[c])])
}

/// 2-norm condition number from singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
