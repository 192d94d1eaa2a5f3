//! Gaussian prior precision matrices.
//!
//! Priors are zero-mean Gaussian and described by their inverse covariance
//! matrix. A diagonal matrix with entry `lambda` is ridge penalization with
//! prior variance `1/lambda`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::ParamLayout;
use crate::linalg;

/// Which coordinates, if any, get one copy per center or per cluster in the
/// combined model the prior is built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Stratification {
    None,
    /// `param_indices` into the local layout become center-specific; the
    /// combined model has one copy per center.
    CenterSpecific {
        param_indices: Vec<usize>,
        centers: usize,
    },
    /// As above but centers sharing a cluster share the copy.
    Clustered {
        param_indices: Vec<usize>,
        clusters: usize,
    },
}

impl Stratification {
    pub fn param_indices(&self) -> &[usize] {
        match self {
            Stratification::None => &[],
            Stratification::CenterSpecific { param_indices, .. }
            | Stratification::Clustered { param_indices, .. } => param_indices,
        }
    }

    pub fn group_count(&self) -> usize {
        match self {
            Stratification::None => 0,
            Stratification::CenterSpecific { centers, .. } => *centers,
            Stratification::Clustered { clusters, .. } => *clusters,
        }
    }

    fn validate(&self, layout: &ParamLayout) -> Result<()> {
        let indices = self.param_indices();
        let d = layout.total_dim();
        if matches!(self, Stratification::None) {
            return Ok(());
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument(
                "stratification requires at least one parameter index".into(),
            ));
        }
        if self.group_count() == 0 {
            return Err(Error::InvalidArgument(
                "stratification requires a positive center/cluster count".into(),
            ));
        }
        let mut seen = vec![false; d];
        for &i in indices {
            if i >= d {
                return Err(Error::InvalidArgument(format!(
                    "stratified parameter index {i} out of range for layout of dimension {d}"
                )));
            }
            if seen[i] {
                return Err(Error::InvalidArgument(format!(
                    "stratified parameter index {i} listed twice"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Inverse covariance of a zero-mean Gaussian prior, together with the local
/// layout it refers to and the stratification under which its dimension was
/// expanded.
///
/// With no stratification the matrix lives on the local coordinates. Under
/// stratification it lives on the combined coordinates: shared coordinates
/// first (in local layout order, stratified ones removed), then one copy of
/// the stratified coordinates per center/cluster, in group order.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    pub lambda: DMatrix<f64>,
    pub layout: ParamLayout,
    pub strat: Stratification,
}

impl PriorSpec {
    pub fn new(lambda: DMatrix<f64>, layout: ParamLayout, strat: Stratification) -> Result<Self> {
        strat.validate(&layout)?;
        let expected = Self::expanded_dim(&layout, &strat);
        if lambda.nrows() != expected || lambda.ncols() != expected {
            return Err(Error::DimensionMismatch {
                what: "prior precision matrix",
                expected,
                got: lambda.nrows().max(lambda.ncols()),
            });
        }
        // symmetric positive definite, checked via Cholesky
        linalg::cholesky(&lambda, "prior precision matrix")?;
        Ok(PriorSpec {
            lambda,
            layout,
            strat,
        })
    }

    /// Total coordinate count the prior covers.
    pub fn dim(&self) -> usize {
        self.lambda.nrows()
    }

    /// Dimension after expanding stratified coordinates to their per-group
    /// copies.
    pub fn expanded_dim(layout: &ParamLayout, strat: &Stratification) -> usize {
        let d = layout.total_dim();
        let q = strat.param_indices().len();
        match strat {
            Stratification::None => d,
            _ => d - q + strat.group_count() * q,
        }
    }
}

/// Per-coordinate prior precision, before expansion.
#[derive(Clone, Debug)]
pub enum LambdaSpec {
    /// Same precision for every coordinate.
    Scalar(f64),
    /// One precision per local-layout coordinate.
    PerCoordinate(Vec<f64>),
}

impl LambdaSpec {
    fn local_diagonal(&self, d: usize) -> Result<Vec<f64>> {
        let diag = match self {
            LambdaSpec::Scalar(v) => vec![*v; d],
            LambdaSpec::PerCoordinate(v) => {
                if v.len() != d {
                    return Err(Error::DimensionMismatch {
                        what: "per-coordinate lambda",
                        expected: d,
                        got: v.len(),
                    });
                }
                v.clone()
            }
        };
        for &v in &diag {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "prior precision entries must be positive, got {v}"
                )));
            }
        }
        Ok(diag)
    }
}

/// Builds a diagonal prior precision matrix of the correct (expanded)
/// dimension for the given layout and stratification.
///
/// Each stratified coordinate's precision is replicated once per group.
pub fn build_prior(
    layout: &ParamLayout,
    lambda: &LambdaSpec,
    strat: Stratification,
) -> Result<PriorSpec> {
    strat.validate(layout)?;
    let local = lambda.local_diagonal(layout.total_dim())?;
    let strat_idx = strat.param_indices();
    let mut diag = Vec::with_capacity(PriorSpec::expanded_dim(layout, &strat));
    for (i, &v) in local.iter().enumerate() {
        if !strat_idx.contains(&i) {
            diag.push(v);
        }
    }
    for _ in 0..strat.group_count() {
        for &i in strat_idx {
            diag.push(local[i]);
        }
    }
    let n = diag.len();
    let mut m = DMatrix::zeros(n, n);
    for (i, v) in diag.into_iter().enumerate() {
        m[(i, i)] = v;
    }
    PriorSpec::new(m, layout.clone(), strat)
}
