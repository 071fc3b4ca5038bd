//! Dense linear algebra kernels for desk-scale systems.
//!
//! The stationary-distribution and Poisson solves never exceed a few hundred
//! unknowns, so a partial-pivot LU factorization is exact enough and avoids a
//! native BLAS/LAPACK dependency.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
///
/// Returns `SingularSolve` when a pivot falls below `1e-13` times the largest
/// absolute entry of `a`, which is the rank-deficiency signal the callers
/// translate into domain errors (e.g. a non-unichain transition matrix).
pub fn lu_solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "lu_solve: matrix {}x{} with rhs of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let scale = a.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
    let tol = 1e-13 * scale;

    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
            .unwrap();
        if m[[pivot_row, col]].abs() < tol {
            return Err(Error::SingularSolve(format!(
                "pivot {:.3e} below tolerance {:.3e} at column {col}",
                m[[pivot_row, col]].abs(),
                tol
            )));
        }
        if pivot_row != col {
            for j in 0..n {
                m.swap([pivot_row, j], [col, j]);
            }
            x.swap(pivot_row, col);
        }
        let pivot = m[[col, col]];
        for row in col + 1..n {
            let factor = m[[row, col]] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                m[[row, j]] -= factor * m[[col, j]];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = x[col];
        for j in col + 1..n {
            v -= m[[col, j]] * x[j];
        }
        x[col] = v / m[[col, col]];
    }
    Ok(x)
}
