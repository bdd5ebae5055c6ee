//! Thin dense linear-algebra helpers over nalgebra.
//!
//! Desk-scale problems only: the Bellman and visitation systems are
//! (SA)×(SA) with SA ≲ 10⁴, so dense LU is the right tool.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (rows, cols) = a.dim();
    DMatrix::from_fn(rows, cols, |i, j| a[[i, j]])
}

/// Solve A x = b by dense LU. Returns None when the factorization is singular.
pub fn solve_lu(a: &Array2<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let m = to_dmatrix(a);
    let rhs = DVector::from_column_slice(b);
    m.lu().solve(&rhs).map(|x| x.as_slice().to_vec())
}

/// Solve Aᵀ x = b by dense LU.
pub fn solve_lu_transposed(a: &Array2<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let m = to_dmatrix(a).transpose();
    let rhs = DVector::from_column_slice(b);
    m.lu().solve(&rhs).map(|x| x.as_slice().to_vec())
}

/// Minimal-norm least-squares solution of A c ≈ b via SVD with a relative
/// singular-value cutoff.
pub fn lstsq_min_norm(a: &Array2<f64>, b: &[f64], rcond: f64) -> Vec<f64> {
    let m = to_dmatrix(a);
    let rhs = DVector::from_column_slice(b);
    let svd = m.svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let eps = rcond * max_sv;
    svd.solve(&rhs, eps)
        .expect("SVD solve cannot fail when U and V are requested")
        .as_slice()
        .to_vec()
}
