//! Small dense linear-algebra helpers backed by nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::{Array1, Array2};

/// Absolute ridge added to the normal equations when they are singular,
/// scaled by `max(1, largest diagonal entry)`.
pub const RIDGE_JITTER: f64 = 1e-10;

/// Cholesky pivots below this fraction of the largest one mark the system
/// as numerically singular.
const SINGULAR_RATIO: f64 = 1e-12;

pub(crate) fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Solves the symmetric positive semi-definite system `a·x = b`.
///
/// Returns the solution and whether ridge jitter was needed. Non-finite
/// input yields an all-NaN solution so callers can detect divergence.
pub fn solve_normal_equations(a: &Array2<f64>, b: &Array1<f64>) -> (Array1<f64>, bool) {
    let n = b.len();
    if n == 0 {
        return (Array1::zeros(0), false);
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return (Array1::from_elem(n, f64::NAN), false);
    }
    let mut m = to_dmatrix(a);
    let rhs = DVector::from_iterator(n, b.iter().copied());
    if let Some(x) = try_cholesky(&m, &rhs) {
        return (x, false);
    }
    let scale = (0..n).map(|i| m[(i, i)]).fold(1.0_f64, f64::max);
    for i in 0..n {
        m[(i, i)] += RIDGE_JITTER * scale;
    }
    match Cholesky::new(m.clone()) {
        Some(chol) => (Array1::from_iter(chol.solve(&rhs).iter().copied()), true),
        None => {
            // not even the jittered system is positive definite; fall back
            // to a pseudo-inverse
            let x = m
                .svd(true, true)
                .solve(&rhs, 1e-14)
                .unwrap_or_else(|_| DVector::zeros(n));
            (Array1::from_iter(x.iter().copied()), true)
        }
    }
}

fn try_cholesky(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<Array1<f64>> {
    let chol = Cholesky::new(m.clone())?;
    let l = chol.l_dirty();
    let diag: Vec<f64> = (0..m.nrows()).map(|i| l[(i, i)]).collect();
    let max = diag.iter().cloned().fold(0.0_f64, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if min.is_nan() || min * min <= SINGULAR_RATIO * max * max {
        return None;
    }
    Some(Array1::from_iter(chol.solve(rhs).iter().copied()))
}
