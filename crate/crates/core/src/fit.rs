//! Local maximum a posteriori estimation.
//!
//! The fit maximizes `log_likelihood(theta) - theta' Lambda theta / 2` by
//! Newton's method with step-halving, starting from zero (so an estimated
//! error variance starts at 1). The returned curvature is the negative
//! Hessian of the log posterior at the estimate, which is exactly the
//! likelihood curvature plus the prior precision.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::glm::{Dataset, Design, Family, ParamLayout};
use crate::linalg::{self, mirror_upper};
use crate::prior::{PriorSpec, Stratification};

pub use crate::linalg::{check_curvature, CurvatureReport};

const MAX_ITER: usize = 100;
const GRAD_TOL: f64 = 1e-8;
const MIN_STEP: f64 = 1e-12;
const JITTER_START: f64 = 1e-8;
// Far from the optimum the log-variance block can be indefinite by more
// than a small multiple of the diagonal; past this point a heavily damped
// step degenerates into gradient ascent, which still makes progress.
const JITTER_MAX: f64 = 1e8;

/// One center's shareable inference result.
#[derive(Clone, Debug)]
pub struct LocalFit {
    pub center_id: String,
    pub family: Family,
    pub layout: ParamLayout,
    /// Local sample size.
    pub n: usize,
    /// MAP estimate in layout order.
    pub theta_hat: DVector<f64>,
    /// Negative Hessian of the log posterior at `theta_hat`.
    pub a_hat: DMatrix<f64>,
    /// Prior precision used for this fit.
    pub lambda: DMatrix<f64>,
    pub converged: bool,
    /// Infinity norm of the posterior gradient at `theta_hat`.
    pub gradient_norm: f64,
}

impl LocalFit {
    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }
}

/// Raw optimizer output for an arbitrary design (used for pooled fits as
/// well as local ones).
#[derive(Clone, Debug)]
pub struct FitOutput {
    pub theta: DVector<f64>,
    pub a_hat: DMatrix<f64>,
    pub converged: bool,
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Computes the MAP estimate for one center.
///
/// Non-convergence within the iteration budget is reported through the
/// `converged` flag, never silently.
pub fn map_estimate(family: &Family, data: &Dataset, prior: &PriorSpec) -> Result<LocalFit> {
    prior.layout.validate_for(family)?;
    if !matches!(prior.strat, Stratification::None) {
        return Err(Error::InvalidArgument(
            "local fits take an unstratified prior; stratification applies when combining".into(),
        ));
    }
    let design = Design::single(data, &prior.layout)?;
    let out = newton_map(family, &design, &prior.lambda)?;
    Ok(LocalFit {
        center_id: data.center_id.clone(),
        family: family.clone(),
        layout: prior.layout.clone(),
        n: data.n(),
        theta_hat: out.theta,
        a_hat: out.a_hat,
        lambda: prior.lambda.clone(),
        converged: out.converged,
        gradient_norm: out.gradient_norm,
    })
}

/// Newton's method with step-halving on the penalized log-likelihood.
pub fn newton_map(family: &Family, design: &Design, lambda: &DMatrix<f64>) -> Result<FitOutput> {
    let d = design.dim();
    if lambda.nrows() != d || lambda.ncols() != d {
        return Err(Error::DimensionMismatch {
            what: "prior precision matrix",
            expected: d,
            got: lambda.nrows().max(lambda.ncols()),
        });
    }
    linalg::cholesky(lambda, "prior precision matrix")?;

    let objective = |theta: &DVector<f64>| -> Result<f64> {
        let ll = design.log_likelihood(family, theta)?;
        Ok(ll - 0.5 * (lambda * theta).dot(theta))
    };

    let mut theta = DVector::zeros(d);
    let mut obj = objective(&theta)?;
    let mut grad = design.score(family, &theta)? - lambda * &theta;
    let mut grad_norm = grad.amax();
    let mut iterations = 0;

    for _ in 0..MAX_ITER {
        if grad_norm < GRAD_TOL {
            break;
        }
        iterations += 1;
        let hess = design.neg_hessian(family, &theta)? + lambda;
        let step = solve_step(&hess, &grad)?;

        // step-halving line search on the penalized objective; the slack
        // admits full Newton steps whose true improvement is below the
        // floating-point resolution of the objective
        let slack = 1e-12 * (1.0 + obj.abs());
        let mut t = 1.0;
        let mut advanced = false;
        while t >= MIN_STEP {
            let candidate = &theta + t * &step;
            if candidate.iter().all(|v| v.is_finite()) {
                if let Ok(new_obj) = objective(&candidate) {
                    if new_obj.is_finite() && new_obj >= obj - slack {
                        theta = candidate;
                        obj = new_obj;
                        advanced = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !advanced {
            break;
        }
        grad = design.score(family, &theta)? - lambda * &theta;
        grad_norm = grad.amax();
    }

    let mut a_hat = design.neg_hessian(family, &theta)? + lambda;
    mirror_upper(&mut a_hat);
    Ok(FitOutput {
        converged: grad_norm < GRAD_TOL,
        gradient_norm: grad_norm,
        theta,
        a_hat,
        iterations,
    })
}

/// Solves the Newton system, adding escalating diagonal jitter when the
/// curvature is indefinite (the log-variance block can be far from convex
/// away from the optimum).
fn solve_step(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = nalgebra::Cholesky::new(hess.clone()) {
        return Ok(chol.solve(grad));
    }
    let scale = 1.0 + hess.diagonal().amax();
    let mut factor = JITTER_START;
    while factor <= JITTER_MAX {
        let mut jittered = hess.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += factor * scale;
        }
        if let Some(chol) = nalgebra::Cholesky::new(jittered) {
            return Ok(chol.solve(grad));
        }
        factor *= 10.0;
    }
    Err(Error::Optimization(format!(
        "Newton curvature not positive definite even with jitter up to {JITTER_MAX:e} x {scale:e}"
    )))
}
