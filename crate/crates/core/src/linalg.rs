//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest absolute difference between `m` and its transpose.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn eigenvalue_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Checks that `m` is square, symmetric to `1e-12` and positive definite.
pub fn require_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Domain(format!(
            "{what} must be a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what} has non-finite entries")));
    }
    let asym = asymmetry(m);
    if asym > 1e-12 {
        return Err(Error::Domain(format!("{what} is not symmetric (max asymmetry {asym:e})")));
    }
    let (lo, _) = eigenvalue_range(m);
    if lo <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!(
            "{what} has minimum eigenvalue {lo:e}"
        )));
    }
    Ok(())
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Domain("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Quadratic form `v^T m v`.
pub fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..m.ncols() {
        let mut col = 0.0;
        for i in 0..m.nrows() {
            col += m[(i, j)] * v[i];
        }
        acc += col * v[j];
    }
    acc
}

pub fn unit(v: &DVector<f64>) -> Option<DVector<f64>> {
    let n = v.norm();
    (n > 0.0 && n.is_finite()).then(|| v / n)
}

pub fn basis(dim: usize, index: usize) -> DVector<f64> {
    let mut e = DVector::zeros(dim);
    e[index] = 1.0;
    e
}

pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
