//! Model families, parameter layout and the log-likelihood derivatives that
//! drive MAP estimation.
//!
//! The parameter vector is always ordered: intercept coordinate(s) first,
//! covariate coefficients in declared order, and the log-variance nuisance
//! coordinate last. That ordering is a wire contract shared with the
//! message format, not a statistical statement.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::mirror_upper;

/// Outcome model linking covariates to the response.
///
/// The link is implied by the family: identity for the Gaussian kinds,
/// logit for the Bernoulli kind. A Gaussian model with unknown error
/// variance carries one nuisance coordinate, the log of the variance, so
/// that a mean-zero Gaussian prior on the transformed parameter keeps the
/// variance positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    /// Gaussian outcome, error variance estimated via its logarithm.
    GaussianEstVar,
    /// Gaussian outcome with known error variance.
    GaussianFixedVar { sigma2: f64 },
    /// Bernoulli outcome with logit link; responses must be exactly 0 or 1.
    BinomialLogit,
}

impl Family {
    pub fn gaussian_fixed(sigma2: f64) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fixed error variance must be a positive real, got {sigma2}"
            )));
        }
        Ok(Family::GaussianFixedVar { sigma2 })
    }

    /// Number of nuisance coordinates the family adds to the layout.
    pub fn nuisance_count(&self) -> usize {
        match self {
            Family::GaussianEstVar => 1,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Family::GaussianFixedVar { sigma2 } = self {
            Family::gaussian_fixed(*sigma2)?;
        }
        Ok(())
    }
}

/// Declared covariate, before expansion into model columns.
#[derive(Clone, Debug)]
pub enum CovariateSpec {
    Continuous(String),
    /// Categorical variable with its levels in declared/observed order; the
    /// first level is the reference and gets no column.
    Categorical { name: String, levels: Vec<String> },
}

/// Expands covariate declarations into model column names.
///
/// A categorical with `k` levels contributes `k - 1` reference-coded dummy
/// columns named `name=level`.
pub fn expand_covariates(specs: &[CovariateSpec]) -> Vec<String> {
    let mut names = Vec::new();
    for spec in specs {
        match spec {
            CovariateSpec::Continuous(name) => names.push(name.clone()),
            CovariateSpec::Categorical { name, levels } => {
                for level in levels.iter().skip(1) {
                    names.push(format!("{name}={level}"));
                }
            }
        }
    }
    names
}

/// Authoritative ordering and meaning of the parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    /// Intercept block labels; one entry for an ordinary model, none for a
    /// model without intercept.
    pub intercepts: Vec<String>,
    /// Model column names in coordinate order (categoricals already
    /// expanded to dummy columns).
    pub covariates: Vec<String>,
    /// Whether a trailing log-variance coordinate is present.
    pub nuisance: bool,
}

impl ParamLayout {
    pub fn with_intercept(covariates: Vec<String>, nuisance: bool) -> Self {
        ParamLayout {
            intercepts: vec!["intercept".to_string()],
            covariates,
            nuisance,
        }
    }

    pub fn without_intercept(covariates: Vec<String>, nuisance: bool) -> Self {
        ParamLayout {
            intercepts: Vec::new(),
            covariates,
            nuisance,
        }
    }

    pub fn total_dim(&self) -> usize {
        self.intercepts.len() + self.covariates.len() + usize::from(self.nuisance)
    }

    /// Index of the log-variance coordinate, when present (always last).
    pub fn nuisance_index(&self) -> Option<usize> {
        self.nuisance.then(|| self.total_dim() - 1)
    }

    /// Coordinate names in layout order.
    pub fn coord_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.intercepts.clone();
        names.extend(self.covariates.iter().cloned());
        if self.nuisance {
            names.push("log_var".to_string());
        }
        names
    }

    /// Checks that the nuisance flag matches what the family requires.
    pub fn validate_for(&self, family: &Family) -> Result<()> {
        family.validate()?;
        let want = family.nuisance_count() == 1;
        if self.nuisance != want {
            return Err(Error::InvalidArgument(format!(
                "layout nuisance flag {} does not match family (expects {})",
                self.nuisance, want
            )));
        }
        Ok(())
    }
}

/// One center's raw data. The design matrix holds covariate columns only;
/// the intercept is a layout property, never a stored column.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub center_id: String,
    /// Outcome vector, length `n`.
    pub y: DVector<f64>,
    /// Covariate matrix, `n x p`.
    pub x: DMatrix<f64>,
}

impl Dataset {
    pub fn new(center_id: impl Into<String>, y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidArgument("dataset must have n >= 1".into()));
        }
        if x.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "design matrix rows",
                expected: n,
                got: x.nrows(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(Dataset {
            center_id: center_id.into(),
            y,
            x,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// How one model coordinate maps onto data.
///
/// `group`-scoped coordinates are active only for rows whose group matches;
/// this is how pooled designs express center- or cluster-specific
/// intercepts, interaction effects and variances.
#[derive(Clone, Debug, PartialEq)]
pub enum CoordKind {
    Intercept { group: Option<usize> },
    Covariate { col: usize, group: Option<usize> },
    LogVariance { group: Option<usize> },
}

/// A dataset bound to a coordinate mapping, ready for likelihood work.
#[derive(Clone, Debug)]
pub struct Design {
    y: DVector<f64>,
    x: DMatrix<f64>,
    row_group: Vec<usize>,
    coords: Vec<CoordKind>,
    /// Per-group list of active linear-predictor coordinates and their data
    /// source, precomputed for evaluation.
    plan: Vec<Vec<(usize, RowSource)>>,
    /// Per-group index of the log-variance coordinate, when the design has
    /// any.
    rho_coord: Vec<Option<usize>>,
}

#[derive(Clone, Copy, Debug)]
enum RowSource {
    One,
    Col(usize),
}

impl Design {
    /// Plain single-center design: every row in group 0.
    pub fn single(data: &Dataset, layout: &ParamLayout) -> Result<Design> {
        if layout.intercepts.len() > 1 {
            return Err(Error::InvalidArgument(
                "a single-center design supports at most one intercept".into(),
            ));
        }
        if layout.covariates.len() != data.x.ncols() {
            return Err(Error::DimensionMismatch {
                what: "covariate columns",
                expected: layout.covariates.len(),
                got: data.x.ncols(),
            });
        }
        let mut coords = Vec::with_capacity(layout.total_dim());
        if layout.intercepts.len() == 1 {
            coords.push(CoordKind::Intercept { group: None });
        }
        for col in 0..layout.covariates.len() {
            coords.push(CoordKind::Covariate { col, group: None });
        }
        if layout.nuisance {
            coords.push(CoordKind::LogVariance { group: None });
        }
        Design::from_parts(data.y.clone(), data.x.clone(), vec![0; data.n()], coords, 1)
    }

    /// Pooled multi-center design.
    ///
    /// Rows are stacked in the order the parts are given; each part carries
    /// the group its rows belong to. The coordinates listed in
    /// `group_coords` (indices into the shared local layout) become one copy
    /// per group, appended after the shared coordinates in group order.
    pub fn pooled(
        parts: &[(&Dataset, usize)],
        layout: &ParamLayout,
        group_coords: &[usize],
        n_groups: usize,
    ) -> Result<Design> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("pooled design needs data".into()));
        }
        if layout.intercepts.len() > 1 {
            return Err(Error::InvalidArgument(
                "pooled designs are built from a single-intercept local layout".into(),
            ));
        }
        let d_local = layout.total_dim();
        let p = layout.covariates.len();
        for &c in group_coords {
            if c >= d_local {
                return Err(Error::InvalidArgument(format!(
                    "group coordinate {c} out of range for layout of dimension {d_local}"
                )));
            }
        }
        let local_kind = |c: usize| -> CoordKind {
            let k_int = layout.intercepts.len();
            if c < k_int {
                CoordKind::Intercept { group: None }
            } else if c < k_int + p {
                CoordKind::Covariate {
                    col: c - k_int,
                    group: None,
                }
            } else {
                CoordKind::LogVariance { group: None }
            }
        };
        let with_group = |kind: CoordKind, g: usize| -> CoordKind {
            match kind {
                CoordKind::Intercept { .. } => CoordKind::Intercept { group: Some(g) },
                CoordKind::Covariate { col, .. } => CoordKind::Covariate {
                    col,
                    group: Some(g),
                },
                CoordKind::LogVariance { .. } => CoordKind::LogVariance { group: Some(g) },
            }
        };

        let mut coords = Vec::new();
        for c in 0..d_local {
            if !group_coords.contains(&c) {
                coords.push(local_kind(c));
            }
        }
        for g in 0..n_groups {
            for &c in group_coords {
                coords.push(with_group(local_kind(c), g));
            }
        }

        let n_total: usize = parts.iter().map(|(d, _)| d.n()).sum();
        let mut y = DVector::zeros(n_total);
        let mut x = DMatrix::zeros(n_total, p);
        let mut row_group = Vec::with_capacity(n_total);
        let mut row = 0;
        for (data, g) in parts {
            if *g >= n_groups {
                return Err(Error::InvalidArgument(format!(
                    "group label {g} out of range (n_groups = {n_groups})"
                )));
            }
            if data.x.ncols() != p {
                return Err(Error::DimensionMismatch {
                    what: "covariate columns",
                    expected: p,
                    got: data.x.ncols(),
                });
            }
            for i in 0..data.n() {
                y[row] = data.y[i];
                for c in 0..p {
                    x[(row, c)] = data.x[(i, c)];
                }
                row_group.push(*g);
                row += 1;
            }
        }
        Design::from_parts(y, x, row_group, coords, n_groups)
    }

    fn from_parts(
        y: DVector<f64>,
        x: DMatrix<f64>,
        row_group: Vec<usize>,
        coords: Vec<CoordKind>,
        n_groups: usize,
    ) -> Result<Design> {
        let mut plan = vec![Vec::new(); n_groups];
        let mut rho_coord = vec![None; n_groups];
        let mut global_rho = None;
        for (j, kind) in coords.iter().enumerate() {
            match kind {
                CoordKind::Intercept { group } => {
                    for (g, entries) in plan.iter_mut().enumerate() {
                        if group.is_none_or(|gg| gg == g) {
                            entries.push((j, RowSource::One));
                        }
                    }
                }
                CoordKind::Covariate { col, group } => {
                    if *col >= x.ncols() {
                        return Err(Error::InvalidArgument(format!(
                            "coordinate {j} references missing column {col}"
                        )));
                    }
                    for (g, entries) in plan.iter_mut().enumerate() {
                        if group.is_none_or(|gg| gg == g) {
                            entries.push((j, RowSource::Col(*col)));
                        }
                    }
                }
                CoordKind::LogVariance { group } => match group {
                    None => global_rho = Some(j),
                    Some(g) => rho_coord[*g] = Some(j),
                },
            }
        }
        if let Some(j) = global_rho {
            for slot in rho_coord.iter_mut() {
                *slot = Some(j);
            }
        }
        Ok(Design {
            y,
            x,
            row_group,
            coords,
            plan,
            rho_coord,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[CoordKind] {
        &self.coords
    }

    fn eta(&self, i: usize, theta: &DVector<f64>) -> f64 {
        let mut eta = 0.0;
        for &(j, src) in &self.plan[self.row_group[i]] {
            let v = match src {
                RowSource::One => 1.0,
                RowSource::Col(c) => self.x[(i, c)],
            };
            eta += v * theta[j];
        }
        eta
    }

    fn rho_index(&self, i: usize) -> Result<usize> {
        self.rho_coord[self.row_group[i]].ok_or_else(|| {
            Error::InvalidArgument("design has no log-variance coordinate for this row".into())
        })
    }

    fn check_theta(&self, family: &Family, theta: &DVector<f64>) -> Result<()> {
        family.validate()?;
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.dim(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(())
    }

    fn check_binary(&self) -> Result<()> {
        if self.y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(
                "Bernoulli outcomes must be exactly 0 or 1".into(),
            ));
        }
        Ok(())
    }

    /// Sum of per-observation conditional log densities.
    pub fn log_likelihood(&self, family: &Family, theta: &DVector<f64>) -> Result<f64> {
        self.check_theta(family, theta)?;
        let n = self.n();
        let mut ll = 0.0;
        match family {
            Family::GaussianFixedVar { sigma2 } => {
                let log_norm = -0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
                for i in 0..n {
                    let r = self.y[i] - self.eta(i, theta);
                    ll += log_norm - r * r / (2.0 * sigma2);
                }
            }
            Family::GaussianEstVar => {
                let log_2pi = (2.0 * std::f64::consts::PI).ln();
                for i in 0..n {
                    let rho = theta[self.rho_index(i)?];
                    let r = self.y[i] - self.eta(i, theta);
                    ll += -0.5 * log_2pi - 0.5 * rho - 0.5 * (-rho).exp() * r * r;
                }
            }
            Family::BinomialLogit => {
                self.check_binary()?;
                for i in 0..n {
                    let eta = self.eta(i, theta);
                    ll += self.y[i] * eta - ln_1p_exp(eta);
                }
            }
        }
        Ok(ll)
    }

    /// Exact gradient of the log-likelihood in layout order.
    pub fn score(&self, family: &Family, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_theta(family, theta)?;
        let mut grad = DVector::zeros(self.dim());
        let n = self.n();
        match family {
            Family::GaussianFixedVar { sigma2 } => {
                for i in 0..n {
                    let r = self.y[i] - self.eta(i, theta);
                    let w = r / sigma2;
                    for &(j, src) in &self.plan[self.row_group[i]] {
                        grad[j] += w * self.value(i, src);
                    }
                }
            }
            Family::GaussianEstVar => {
                for i in 0..n {
                    let rho_j = self.rho_index(i)?;
                    let inv_var = (-theta[rho_j]).exp();
                    let r = self.y[i] - self.eta(i, theta);
                    let w = inv_var * r;
                    for &(j, src) in &self.plan[self.row_group[i]] {
                        grad[j] += w * self.value(i, src);
                    }
                    grad[rho_j] += -0.5 + 0.5 * inv_var * r * r;
                }
            }
            Family::BinomialLogit => {
                self.check_binary()?;
                for i in 0..n {
                    let p = sigmoid(self.eta(i, theta));
                    let w = self.y[i] - p;
                    for &(j, src) in &self.plan[self.row_group[i]] {
                        grad[j] += w * self.value(i, src);
                    }
                }
            }
        }
        Ok(grad)
    }

    /// Exact negative Hessian of the log-likelihood; symmetric by
    /// construction (upper triangle computed once and mirrored).
    pub fn neg_hessian(&self, family: &Family, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_theta(family, theta)?;
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        let n = self.n();
        match family {
            Family::GaussianFixedVar { sigma2 } => {
                for i in 0..n {
                    self.accumulate_outer(&mut h, i, 1.0 / sigma2);
                }
            }
            Family::GaussianEstVar => {
                for i in 0..n {
                    let rho_j = self.rho_index(i)?;
                    let inv_var = (-theta[rho_j]).exp();
                    let r = self.y[i] - self.eta(i, theta);
                    self.accumulate_outer(&mut h, i, inv_var);
                    // cross beta/rho block and the rho diagonal
                    let w = inv_var * r;
                    for &(j, src) in &self.plan[self.row_group[i]] {
                        let (a, b) = if j <= rho_j { (j, rho_j) } else { (rho_j, j) };
                        h[(a, b)] += w * self.value(i, src);
                    }
                    h[(rho_j, rho_j)] += 0.5 * inv_var * r * r;
                }
            }
            Family::BinomialLogit => {
                self.check_binary()?;
                for i in 0..n {
                    let p = sigmoid(self.eta(i, theta));
                    self.accumulate_outer(&mut h, i, p * (1.0 - p));
                }
            }
        }
        mirror_upper(&mut h);
        Ok(h)
    }

    fn value(&self, i: usize, src: RowSource) -> f64 {
        match src {
            RowSource::One => 1.0,
            RowSource::Col(c) => self.x[(i, c)],
        }
    }

    /// Adds `w * v v^t` for observation `i` into the upper triangle of `h`.
    fn accumulate_outer(&self, h: &mut DMatrix<f64>, i: usize, w: f64) {
        let entries = &self.plan[self.row_group[i]];
        for (a, &(j, src_j)) in entries.iter().enumerate() {
            let vj = self.value(i, src_j);
            for &(k, src_k) in &entries[a..] {
                let vk = self.value(i, src_k);
                let (lo, hi) = if j <= k { (j, k) } else { (k, j) };
                h[(lo, hi)] += w * (vj * vk);
            }
        }
    }
}

/// Numerically stable `ln(1 + exp(x))`.
fn ln_1p_exp(x: f64) -> f64 {
    if x > 33.3 {
        x
    } else if x > -37.0 {
        x.exp().ln_1p()
    } else {
        x.exp()
    }
}

/// Standard logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linear predictor for one observation: the active intercept coordinate
/// plus the dot product of covariates and their coefficients.
pub fn linear_predictor(layout: &ParamLayout, covariates: &[f64], theta: &[f64]) -> Result<f64> {
    if layout.intercepts.len() > 1 {
        return Err(Error::InvalidArgument(
            "linear_predictor expects a single-intercept layout".into(),
        ));
    }
    if covariates.len() != layout.covariates.len() {
        return Err(Error::DimensionMismatch {
            what: "covariate row",
            expected: layout.covariates.len(),
            got: covariates.len(),
        });
    }
    if theta.len() != layout.total_dim() {
        return Err(Error::DimensionMismatch {
            what: "parameter vector",
            expected: layout.total_dim(),
            got: theta.len(),
        });
    }
    let k = layout.intercepts.len();
    let mut eta = if k == 1 { theta[0] } else { 0.0 };
    for (i, &v) in covariates.iter().enumerate() {
        eta += v * theta[k + i];
    }
    Ok(eta)
}

/// Log-likelihood of a single-center dataset under the layout's coordinate
/// interpretation.
pub fn log_likelihood(
    family: &Family,
    layout: &ParamLayout,
    data: &Dataset,
    theta: &DVector<f64>,
) -> Result<f64> {
    layout.validate_for(family)?;
    Design::single(data, layout)?.log_likelihood(family, theta)
}

/// Gradient of [`log_likelihood`] with respect to the parameter vector.
pub fn score(
    family: &Family,
    layout: &ParamLayout,
    data: &Dataset,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    layout.validate_for(family)?;
    Design::single(data, layout)?.score(family, theta)
}

/// Negative Hessian of [`log_likelihood`]; exactly symmetric.
pub fn neg_hessian(
    family: &Family,
    layout: &ParamLayout,
    data: &Dataset,
    theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    layout.validate_for(family)?;
    Design::single(data, layout)?.neg_hessian(family, theta)
}
