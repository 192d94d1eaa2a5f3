//! The one-shot exchange format.
//!
//! Each center writes a single self-describing JSON document holding
//! exactly what aggregation needs: the estimate, the posterior curvature,
//! the prior precision, the sample size and the layout that gives the
//! coordinates meaning. Serialization is canonical (fixed key order,
//! shortest round-trip decimals, matrices dense row-major with a diagonal
//! shorthand for the prior), so two serializations of the same fit are
//! byte-identical and values survive a round trip exactly. Unknown schema
//! versions are rejected outright; a misread curvature matrix is not
//! something to best-effort around.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::LocalFit;
use crate::glm::{Family, ParamLayout};
use crate::linalg;

pub const SCHEMA_VERSION: u32 = 1;

/// Prior precision on the wire: diagonal shorthand or dense row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMatrix {
    Diag(Vec<f64>),
    Dense(Vec<f64>),
}

/// On-disk form of one center's inference result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMessage {
    pub schema_version: u32,
    pub center_id: String,
    pub family: Family,
    pub layout: ParamLayout,
    pub n: usize,
    pub theta_hat: Vec<f64>,
    /// Row-major `d x d`, symmetrized before writing.
    pub a_hat: Vec<f64>,
    pub lambda: LambdaMatrix,
    pub converged: bool,
    pub gradient_norm: f64,
}

fn matrix_to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Canonical message text for one local fit.
///
/// Fails on non-finite values; nothing non-finite belongs on the wire.
pub fn serialize_local_fit(fit: &LocalFit) -> Result<String> {
    if fit.theta_hat.iter().any(|v| !v.is_finite())
        || fit.a_hat.iter().any(|v| !v.is_finite())
        || fit.lambda.iter().any(|v| !v.is_finite())
        || !fit.gradient_norm.is_finite()
    {
        return Err(Error::NonFinite("local fit"));
    }
    let d = fit.layout.total_dim();
    if fit.theta_hat.len() != d || fit.a_hat.nrows() != d || fit.lambda.nrows() != d {
        return Err(Error::DimensionMismatch {
            what: "local fit",
            expected: d,
            got: fit.theta_hat.len(),
        });
    }
    // write the symmetrized matrix: upper triangle mirrored
    let mut a = fit.a_hat.clone();
    linalg::mirror_upper(&mut a);
    let lambda = if is_diagonal(&fit.lambda) {
        LambdaMatrix::Diag(fit.lambda.diagonal().iter().copied().collect())
    } else {
        let mut l = fit.lambda.clone();
        linalg::mirror_upper(&mut l);
        LambdaMatrix::Dense(matrix_to_row_major(&l))
    };
    let msg = FitMessage {
        schema_version: SCHEMA_VERSION,
        center_id: fit.center_id.clone(),
        family: fit.family.clone(),
        layout: fit.layout.clone(),
        n: fit.n,
        theta_hat: fit.theta_hat.iter().copied().collect(),
        a_hat: matrix_to_row_major(&a),
        lambda,
        converged: fit.converged,
        gradient_norm: fit.gradient_norm,
    };
    let mut text = serde_json::to_string_pretty(&msg)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Byte offset of a serde_json error within `text`.
fn byte_offset(text: &str, err: &serde_json::Error) -> usize {
    let (line, column) = (err.line(), err.column());
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (idx, l) in text.split('\n').enumerate() {
        if idx + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    text.len()
}

fn parse_message(text: &str) -> Result<FitMessage> {
    let msg: FitMessage = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: byte_offset(text, &e),
        message: e.to_string(),
    })?;
    if msg.schema_version != SCHEMA_VERSION {
        return Err(Error::UnsupportedSchema {
            found: msg.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    Ok(msg)
}

fn decode(msg: FitMessage, allow_non_pd: bool) -> Result<(LocalFit, Vec<String>)> {
    msg.family.validate()?;
    msg.layout.validate_for(&msg.family)?;
    let d = msg.layout.total_dim();
    if msg.theta_hat.len() != d {
        return Err(Error::DimensionMismatch {
            what: "theta_hat",
            expected: d,
            got: msg.theta_hat.len(),
        });
    }
    if msg.a_hat.len() != d * d {
        return Err(Error::DimensionMismatch {
            what: "a_hat",
            expected: d * d,
            got: msg.a_hat.len(),
        });
    }
    if msg.n == 0 {
        return Err(Error::InvalidArgument("sample size must be at least 1".into()));
    }
    let finite = |vals: &[f64], what: &'static str| -> Result<()> {
        if vals.iter().any(|v| !v.is_finite()) {
            Err(Error::NonFinite(what))
        } else {
            Ok(())
        }
    };
    finite(&msg.theta_hat, "theta_hat")?;
    finite(&msg.a_hat, "a_hat")?;
    if !msg.gradient_norm.is_finite() {
        return Err(Error::NonFinite("gradient_norm"));
    }

    let mut a_hat = DMatrix::from_row_slice(d, d, &msg.a_hat);
    linalg::require_symmetric(&a_hat, linalg::SYMMETRY_TOL, "a_hat")?;
    linalg::mirror_upper(&mut a_hat);

    let lambda = match &msg.lambda {
        LambdaMatrix::Diag(diag) => {
            if diag.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "lambda diagonal",
                    expected: d,
                    got: diag.len(),
                });
            }
            finite(diag, "lambda")?;
            DMatrix::from_fn(d, d, |i, j| if i == j { diag[i] } else { 0.0 })
        }
        LambdaMatrix::Dense(entries) => {
            if entries.len() != d * d {
                return Err(Error::DimensionMismatch {
                    what: "lambda",
                    expected: d * d,
                    got: entries.len(),
                });
            }
            finite(entries, "lambda")?;
            let mut l = DMatrix::from_row_slice(d, d, entries);
            linalg::require_symmetric(&l, linalg::SYMMETRY_TOL, "lambda")?;
            linalg::mirror_upper(&mut l);
            l
        }
    };

    let mut warnings = Vec::new();
    for (matrix, what) in [(&a_hat, "a_hat"), (&lambda, "lambda")] {
        let report = linalg::check_curvature(matrix)?;
        if !report.is_pd {
            let note = format!(
                "center {}: {what} is not positive definite (Cholesky failed at pivot {}, \
                 eigenvalue lower bound {:.3e})",
                msg.center_id,
                report.failed_pivot.unwrap_or(0),
                report.min_eigen_bound
            );
            if allow_non_pd {
                warnings.push(note);
            } else {
                return Err(Error::NotPositiveDefinite {
                    context: format!("{what} of center {}", msg.center_id),
                    pivot: report.failed_pivot.unwrap_or(0),
                    eigen_bound: report.min_eigen_bound,
                });
            }
        }
    }

    Ok((
        LocalFit {
            center_id: msg.center_id,
            family: msg.family,
            layout: msg.layout,
            n: msg.n,
            theta_hat: DVector::from_vec(msg.theta_hat),
            a_hat,
            lambda,
            converged: msg.converged,
            gradient_norm: msg.gradient_norm,
        },
        warnings,
    ))
}

/// Parses and validates a message; a curvature or prior that is not
/// positive definite is an error here.
pub fn deserialize_local_fit(text: &str) -> Result<LocalFit> {
    decode(parse_message(text)?, false).map(|(fit, _)| fit)
}

/// Like [`deserialize_local_fit`] but demotes positive-definiteness
/// failures to returned warnings, for callers that explicitly choose to
/// combine such a fit anyway.
pub fn deserialize_local_fit_lenient(text: &str) -> Result<(LocalFit, Vec<String>)> {
    decode(parse_message(text)?, true)
}

/// Compatibility report across a set of fits; empty means combinable.
#[derive(Clone, Debug, Default)]
pub struct CompatibilityReport {
    pub violations: Vec<String>,
}

impl CompatibilityReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every obstacle to combining: family mismatches, covariate
/// name/order mismatches, nuisance flag mismatches and duplicate ids.
pub fn validate_compatibility(fits: &[LocalFit]) -> CompatibilityReport {
    let mut report = CompatibilityReport::default();
    let Some(first) = fits.first() else {
        report.violations.push("no fits given".into());
        return report;
    };
    for fit in &fits[1..] {
        if fit.family != first.family {
            report.violations.push(format!(
                "center {}: family {:?} differs from center {}'s {:?}",
                fit.center_id, fit.family, first.center_id, first.family
            ));
        }
        if fit.layout.covariates != first.layout.covariates {
            report.violations.push(format!(
                "center {}: covariate names/order {:?} differ from {:?}",
                fit.center_id, fit.layout.covariates, first.layout.covariates
            ));
        }
        if fit.layout.nuisance != first.layout.nuisance {
            report.violations.push(format!(
                "center {}: nuisance flag {} differs from {}",
                fit.center_id, fit.layout.nuisance, first.layout.nuisance
            ));
        }
        if fit.layout.intercepts != first.layout.intercepts {
            report.violations.push(format!(
                "center {}: intercept block differs from center {}",
                fit.center_id, first.center_id
            ));
        }
    }
    let mut ids: Vec<&String> = fits.iter().map(|f| &f.center_id).collect();
    ids.sort();
    for pair in ids.windows(2) {
        if pair[0] == pair[1] {
            report
                .violations
                .push(format!("duplicate center id {}", pair[0]));
        }
    }
    report
}
