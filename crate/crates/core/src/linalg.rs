//! Small dense helpers shared by the estimators and the closed-form bias code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value floor below which a matrix is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Ratio of extreme eigenvalues of a symmetric matrix (infinite if not positive definite).
pub fn sym_condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a symmetric positive definite matrix, refusing near-singular input.
pub fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let cond = sym_condition_number(m);
    // eigenvalue ratio is the square of the singular-value ratio of the underlying design
    if !cond.is_finite() || cond > 1.0 / (RANK_TOL * RANK_TOL) {
        return Err(Error::singular(context, cond));
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::singular(context, cond))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Sum in a fixed pairwise tree so the result does not depend on how the
/// caller produced the slice (sequentially or in parallel).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// `X' diag(w) Y` without materialising the diagonal.
pub fn weighted_cross(x: &DMatrix<f64>, w: &[f64], y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.ncols(), y.ncols());
    for i in 0..x.nrows() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for a in 0..x.ncols() {
            let xa = x[(i, a)] * wi;
            if xa == 0.0 {
                continue;
            }
            for b in 0..y.ncols() {
                out[(a, b)] += xa * y[(i, b)];
            }
        }
    }
    out
}

/// `X' w` for a weight vector.
pub fn weighted_colsum(x: &DMatrix<f64>, w: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(x.ncols());
    for i in 0..x.nrows() {
        for a in 0..x.ncols() {
            out[a] += x[(i, a)] * w[i];
        }
    }
    out
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
    }

    #[test]
    fn spd_inverse_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(spd_inverse(&m, "t"), Err(Error::Singular { .. })));
    }

    #[test]
    fn weighted_cross_matches_dense() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 2.0]);
        let w = [0.5, 1.0, 0.25];
        let dense = x.transpose() * DMatrix::from_diagonal(&DVector::from_row_slice(&w)) * &y;
        assert!((weighted_cross(&x, &w, &y) - dense).abs().max() < 1e-14);
    }
}
