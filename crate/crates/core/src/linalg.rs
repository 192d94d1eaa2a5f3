//! Dense symmetric linear algebra helpers built on Cholesky factorization.
//!
//! Every solve in this crate goes through a Cholesky factor; explicit
//! inverses are formed only where a full inverse is part of the contract
//! (per-coordinate standard deviations, precision-weighted averages).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Largest absolute asymmetry accepted before a matrix is rejected.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Symmetry/positive-definiteness report for a curvature matrix.
#[derive(Debug, Clone)]
pub struct CurvatureReport {
    /// Whether a Cholesky factorization succeeds without jitter.
    pub is_pd: bool,
    /// Gershgorin lower bound on the smallest eigenvalue.
    pub min_eigen_bound: f64,
    /// Squared ratio of extreme Cholesky diagonal entries; `None` when the
    /// factorization failed.
    pub condition_estimate: Option<f64>,
    /// Pivot at which the factorization failed, when it did.
    pub failed_pivot: Option<usize>,
}

/// Gershgorin lower bound for the smallest eigenvalue of a symmetric matrix.
pub fn gershgorin_lower_bound(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut bound = f64::INFINITY;
    for i in 0..n {
        let mut radius = 0.0;
        for j in 0..n {
            if j != i {
                radius += a[(i, j)].abs();
            }
        }
        bound = bound.min(a[(i, i)] - radius);
    }
    if n == 0 {
        0.0
    } else {
        bound
    }
}

fn max_asymmetry(a: &DMatrix<f64>) -> Option<(usize, usize, f64)> {
    let n = a.nrows();
    let mut worst: Option<(usize, usize, f64)> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            let delta = (a[(i, j)] - a[(j, i)]).abs();
            if delta > 0.0 && worst.is_none_or(|(_, _, w)| delta > w) {
                worst = Some((i, j, delta));
            }
        }
    }
    worst
}

/// Fails unless `a` is square and symmetric to within `tol`.
pub fn require_symmetric(a: &DMatrix<f64>, tol: f64, context: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            what: "symmetric matrix",
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    if let Some((i, j, delta)) = max_asymmetry(a) {
        if delta > tol {
            return Err(Error::NotSymmetric {
                context: context.to_string(),
                i,
                j,
                delta,
            });
        }
    }
    Ok(())
}

/// Replaces the lower triangle with the upper one so `a` becomes exactly
/// symmetric.
pub fn mirror_upper(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            a[(j, i)] = a[(i, j)];
        }
    }
}

/// Cholesky factorization of a symmetric positive definite matrix.
///
/// On failure reports the pivot at which the factorization broke down and a
/// Gershgorin bound on the offending eigen-direction.
pub fn cholesky(a: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    require_symmetric(a, SYMMETRY_TOL, context)?;
    Cholesky::new(a.clone()).ok_or_else(|| Error::NotPositiveDefinite {
        context: context.to_string(),
        pivot: failing_pivot(a),
        eigen_bound: gershgorin_lower_bound(a),
    })
}

/// First pivot index at which a Cholesky factorization breaks down.
fn failing_pivot(a: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    for k in 1..=n {
        let leading = a.view((0, 0), (k, k)).into_owned();
        if Cholesky::new(leading).is_none() {
            return k - 1;
        }
    }
    n.saturating_sub(1)
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let chol = cholesky(a, context)?;
    Ok(chol.solve(b))
}

/// Full inverse of a symmetric positive definite matrix.
pub fn inverse_spd(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let chol = cholesky(a, context)?;
    Ok(chol.inverse())
}

/// Symmetry + positive-definiteness report for a symmetric matrix.
///
/// `is_pd` is true iff Cholesky succeeds without any jitter; the condition
/// estimate is `(max_i l_ii / min_i l_ii)^2` from the Cholesky diagonal.
pub fn check_curvature(a: &DMatrix<f64>) -> Result<CurvatureReport> {
    require_symmetric(a, SYMMETRY_TOL, "curvature check")?;
    let bound = gershgorin_lower_bound(a);
    match Cholesky::new(a.clone()) {
        Some(chol) => {
            let l = chol.l();
            let mut dmin = f64::INFINITY;
            let mut dmax = 0.0_f64;
            for i in 0..l.nrows() {
                dmin = dmin.min(l[(i, i)]);
                dmax = dmax.max(l[(i, i)]);
            }
            let cond = if dmin > 0.0 {
                (dmax / dmin).powi(2)
            } else {
                f64::INFINITY
            };
            Ok(CurvatureReport {
                is_pd: true,
                min_eigen_bound: bound,
                condition_estimate: Some(cond),
                failed_pivot: None,
            })
        }
        None => Ok(CurvatureReport {
            is_pd: false,
            min_eigen_bound: bound,
            condition_estimate: None,
            failed_pivot: Some(failing_pivot(a)),
        }),
    }
}

/// Extracts the submatrix `a[rows, cols]`.
pub fn gather(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

/// Extracts the subvector `v[idx]`.
pub fn gather_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}
