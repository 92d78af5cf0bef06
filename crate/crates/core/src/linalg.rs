//! Small dense helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Numerically stable logistic function.
#[inline]
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^eta) without overflow.
#[inline]
pub fn log1pexp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Stacks equal-length rows into an n×d matrix.
pub fn rows_to_matrix(rows: &[&[f64]]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(n, d, |i, j| rows[i][j])
}

pub fn dot_row(x: &DMatrix<f64>, i: usize, beta: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..x.ncols() {
        s += x[(i, j)] * beta[j];
    }
    s
}

/// Adds `w · x_i x_iᵀ` into the lower triangle of `acc`.
#[inline]
pub fn add_outer_lower(acc: &mut DMatrix<f64>, x: &DMatrix<f64>, i: usize, w: f64) {
    let d = x.ncols();
    for a in 0..d {
        let xa = w * x[(i, a)];
        for b in 0..=a {
            acc[(a, b)] += xa * x[(i, b)];
        }
    }
}

pub fn fill_upper(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for a in 0..d {
        for b in (a + 1)..d {
            m[(a, b)] = m[(b, a)];
        }
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_well_conditioned(m) {
        return Err(Error::SingularDesign);
    }
    let chol = m.clone().cholesky().ok_or(Error::SingularDesign)?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn spd_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = m.clone().cholesky().ok_or(Error::SingularDesign)?;
    Ok(chol.solve(rhs))
}

/// Inverse of a general square matrix via LU.
pub fn general_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or(Error::SingularDesign)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let s = symmetrize(m);
    s.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Eigenvalue-ratio rank test for a symmetric PSD matrix.
pub fn is_well_conditioned(m: &DMatrix<f64>) -> bool {
    if m.nrows() == 0 {
        return false;
    }
    if m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let eig = symmetrize(m).symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > max * 1e-12
}

/// `a · m · aᵀ` for a (p×d) and symmetric m (d×d).
pub fn quad_form(a: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(a * m * a.transpose()))
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}
