//! One-shot aggregation of local fits.
//!
//! Every rule here maximizes the same object: the quadratic surrogate of
//! the pooled-data log posterior obtained by replacing each center's log
//! posterior with its second-order expansion around the local MAP estimate
//! and correcting for the priors counted twice. For a shared parameter
//! vector the maximizer has the precision-weighted-average closed form; for
//! center- or cluster-specific coordinates the block system is solved
//! through its Schur complement, which keeps the combined curvature in the
//! block-arrow shape that is reported back to the caller.
//!
//! Per-center terms enter through associative sums, so results can be
//! updated when a delayed center arrives without revisiting earlier
//! centers; outputs are bitwise deterministic for a fixed accumulation
//! order, and the entry points below fix that order to ascending center id.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fit::LocalFit;
use crate::glm::{Family, ParamLayout};
use crate::linalg::{self, gather, gather_vec, mirror_upper};
use crate::prior::{PriorSpec, Stratification};

/// Scope of one coordinate of the combined model.
#[derive(Clone, Debug, PartialEq)]
pub enum CoordScope {
    Shared,
    Center(String),
    Cluster(usize),
}

/// Name and scope of one combined-model coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordLabel {
    pub name: String,
    pub scope: CoordScope,
}

impl fmt::Display for CoordLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.scope {
            CoordScope::Shared => write!(f, "{}", self.name),
            CoordScope::Center(id) => write!(f, "{}[center={}]", self.name, id),
            CoordScope::Cluster(k) => write!(f, "{}[cluster={}]", self.name, k),
        }
    }
}

/// Structural assumption under which fits are aggregated.
#[derive(Clone, Debug, PartialEq)]
pub enum StructureMode {
    /// All centers share every coordinate.
    Homogeneous,
    /// The listed local coordinates are center-specific.
    Stratified { param_indices: Vec<usize> },
    /// The intercept is shared within clusters; `cluster_of_center` maps
    /// center id to a 1-based cluster label in `1..=clusters`.
    Clustered {
        cluster_of_center: BTreeMap<String, usize>,
        clusters: usize,
    },
}

/// Structure plus the prior for the fictive combined data set.
#[derive(Clone, Debug)]
pub struct StructureSpec {
    pub mode: StructureMode,
    pub lambda_combined: PriorSpec,
}

/// Aggregated estimate, curvature and derived standard deviations.
#[derive(Clone, Debug)]
pub struct BfiResult {
    /// Estimate in the combined layout: shared coordinates first (local
    /// order), then center/cluster-specific coordinates in group order.
    pub theta: DVector<f64>,
    /// Combined curvature; block-arrow structured under stratification.
    pub a_matrix: DMatrix<f64>,
    /// `sqrt(diag(a_matrix^-1))`, strictly positive.
    pub sd: DVector<f64>,
    pub labels: Vec<CoordLabel>,
    pub structure: StructureSpec,
    /// Contributing centers and their sample sizes, ascending by id.
    pub centers: Vec<(String, usize)>,
    pub family: Family,
    pub layout: ParamLayout,
}

impl BfiResult {
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Position of a combined coordinate by name and scope.
    pub fn coord_index(&self, name: &str, scope: &CoordScope) -> Option<usize> {
        self.labels
            .iter()
            .position(|l| l.name == name && &l.scope == scope)
    }

    /// Total pooled sample size.
    pub fn n_total(&self) -> usize {
        self.centers.iter().map(|(_, n)| n).sum()
    }

    /// Per-center estimates of a center-specific coordinate, in center
    /// order; the input to [`fit_center_covariate`] when a center-level
    /// covariate drives that coordinate.
    pub fn center_estimates(&self, name: &str) -> Vec<(String, f64)> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(k, label)| match &label.scope {
                CoordScope::Center(id) if label.name == name => {
                    Some((id.clone(), self.theta[k]))
                }
                _ => None,
            })
            .collect()
    }
}

fn check_fits(fits: &[&LocalFit]) -> Result<()> {
    let first = fits.first().ok_or_else(|| {
        Error::InvalidArgument("cannot combine an empty list of local fits".into())
    })?;
    let mut violations = Vec::new();
    for fit in fits {
        if fit.family != first.family {
            violations.push(format!(
                "center {}: family {:?} differs from {:?}",
                fit.center_id, fit.family, first.family
            ));
        }
        if fit.layout != first.layout {
            violations.push(format!(
                "center {}: parameter layout differs from center {}",
                fit.center_id, first.center_id
            ));
        }
        let d = fit.layout.total_dim();
        if fit.theta_hat.len() != d || fit.a_hat.nrows() != d || fit.lambda.nrows() != d {
            violations.push(format!(
                "center {}: vector/matrix dimensions do not match the layout",
                fit.center_id
            ));
        }
    }
    for pair in fits.windows(2) {
        if pair[0].center_id == pair[1].center_id {
            violations.push(format!("duplicate center id {}", pair[0].center_id));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(violations))
    }
}

fn sorted_by_id(fits: &[LocalFit]) -> Vec<&LocalFit> {
    let mut refs: Vec<&LocalFit> = fits.iter().collect();
    refs.sort_by(|a, b| a.center_id.cmp(&b.center_id));
    refs
}

fn sd_from_curvature(a: &DMatrix<f64>, context: &str) -> Result<DVector<f64>> {
    let inv = linalg::inverse_spd(a, context)?;
    let mut sd = DVector::zeros(a.nrows());
    for i in 0..a.nrows() {
        if inv[(i, i)] <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                context: context.to_string(),
                pivot: i,
                eigen_bound: linalg::gershgorin_lower_bound(a),
            });
        }
        sd[i] = inv[(i, i)].sqrt();
    }
    Ok(sd)
}

/// Precision-weighted aggregation of arbitrary `(theta, A, Lambda)`
/// triples sharing one coordinate system.
///
/// Returns the combined estimate and curvature:
/// `A = sum A_l + Lambda - sum Lambda_l`, `theta = A^-1 sum A_l theta_l`.
/// The rule is agnostic to what the coordinates mean, so it serves any
/// parameter block a caller fits locally under a Gaussian prior.
pub fn combine_triples(
    triples: &[(DVector<f64>, DMatrix<f64>, DMatrix<f64>)],
    lambda_combined: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = lambda_combined.nrows();
    if triples.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot combine an empty list of triples".into(),
        ));
    }
    let mut sum_a = DMatrix::zeros(d, d);
    let mut sum_lambda = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for (theta, a_l, lambda_l) in triples {
        if theta.len() != d || a_l.nrows() != d || lambda_l.nrows() != d {
            return Err(Error::DimensionMismatch {
                what: "triple",
                expected: d,
                got: theta.len(),
            });
        }
        sum_a += a_l;
        sum_lambda += lambda_l;
        rhs += a_l * theta;
    }
    let a = sum_a + lambda_combined - sum_lambda;
    let chol = linalg::cholesky(
        &a,
        "combined curvature (combined prior may be too small relative to the local priors)",
    )?;
    let theta = chol.solve(&rhs);
    Ok((theta, a))
}

/// Running sums for homogeneous aggregation; supports adding delayed
/// centers without revisiting earlier ones.
#[derive(Clone, Debug)]
pub struct HomogeneousAccumulator {
    family: Family,
    layout: ParamLayout,
    sum_a: DMatrix<f64>,
    sum_lambda: DMatrix<f64>,
    sum_a_theta: DVector<f64>,
    centers: Vec<(String, usize)>,
}

impl HomogeneousAccumulator {
    pub fn new(family: Family, layout: ParamLayout) -> Self {
        let d = layout.total_dim();
        HomogeneousAccumulator {
            family,
            layout,
            sum_a: DMatrix::zeros(d, d),
            sum_lambda: DMatrix::zeros(d, d),
            sum_a_theta: DVector::zeros(d),
            centers: Vec::new(),
        }
    }

    pub fn push(&mut self, fit: &LocalFit) -> Result<()> {
        if fit.family != self.family || fit.layout != self.layout {
            return Err(Error::Incompatible(vec![format!(
                "center {}: family or layout differs from the accumulator",
                fit.center_id
            )]));
        }
        if self.centers.iter().any(|(id, _)| id == &fit.center_id) {
            return Err(Error::Incompatible(vec![format!(
                "duplicate center id {}",
                fit.center_id
            )]));
        }
        self.sum_a += &fit.a_hat;
        self.sum_lambda += &fit.lambda;
        self.sum_a_theta += &fit.a_hat * &fit.theta_hat;
        self.centers.push((fit.center_id.clone(), fit.n));
        Ok(())
    }

    pub fn finalize(&self, lambda_combined: &PriorSpec) -> Result<BfiResult> {
        let d = self.layout.total_dim();
        if self.centers.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot combine an empty list of local fits".into(),
            ));
        }
        if !matches!(lambda_combined.strat, Stratification::None) || lambda_combined.dim() != d {
            return Err(Error::InvalidArgument(
                "homogeneous aggregation expects an unstratified combined prior of the local dimension"
                    .into(),
            ));
        }
        let a = &self.sum_a + &lambda_combined.lambda - &self.sum_lambda;
        let chol = linalg::cholesky(
            &a,
            "combined curvature (combined prior may be too small relative to the local priors)",
        )?;
        let theta = chol.solve(&self.sum_a_theta);
        let sd = sd_from_curvature(&a, "combined curvature")?;
        let labels = self
            .layout
            .coord_names()
            .into_iter()
            .map(|name| CoordLabel {
                name,
                scope: CoordScope::Shared,
            })
            .collect();
        Ok(BfiResult {
            theta,
            a_matrix: a,
            sd,
            labels,
            structure: StructureSpec {
                mode: StructureMode::Homogeneous,
                lambda_combined: lambda_combined.clone(),
            },
            centers: self.centers.clone(),
            family: self.family.clone(),
            layout: self.layout.clone(),
        })
    }
}

/// Aggregates local fits under the assumption that all centers share every
/// coordinate.
pub fn combine_homogeneous(fits: &[LocalFit], lambda_combined: &PriorSpec) -> Result<BfiResult> {
    let sorted = sorted_by_id(fits);
    check_fits(&sorted)?;
    let mut acc = HomogeneousAccumulator::new(sorted[0].family.clone(), sorted[0].layout.clone());
    for fit in sorted {
        acc.push(fit)?;
    }
    acc.finalize(lambda_combined)
}

/// How group-specific coordinates are scoped in the output.
#[derive(Clone, Debug)]
enum GroupKind {
    /// Every pushed fit opens its own group labeled by its center id.
    PerCenter,
    /// A fixed number of clusters; fits are pushed with a 0-based label.
    Cluster(usize),
}

#[derive(Clone, Debug)]
struct GroupSums {
    /// Sum of the group-specific curvature blocks.
    b: DMatrix<f64>,
    /// Sum of the group-specific local prior blocks.
    lambda_b: DMatrix<f64>,
    /// Sum of the shared-by-specific cross blocks.
    c: DMatrix<f64>,
    /// Sum of `A_bb theta_b + A_ab^t theta_a`.
    s: DVector<f64>,
    members: usize,
    /// Center id when the group is a single center.
    center_id: Option<String>,
}

impl GroupSums {
    fn new(p: usize, q: usize) -> Self {
        GroupSums {
            b: DMatrix::zeros(q, q),
            lambda_b: DMatrix::zeros(q, q),
            c: DMatrix::zeros(p, q),
            s: DVector::zeros(q),
            members: 0,
            center_id: None,
        }
    }
}

/// Running sums for aggregation with center- or cluster-specific
/// coordinates.
#[derive(Clone, Debug)]
pub struct GroupedAccumulator {
    family: Family,
    layout: ParamLayout,
    kind: GroupKind,
    /// Local coordinates that are group-specific, ascending.
    strat_idx: Vec<usize>,
    /// Remaining (shared) local coordinates, ascending.
    shared_idx: Vec<usize>,
    sum_a_aa: DMatrix<f64>,
    sum_lambda_aa: DMatrix<f64>,
    /// `sum_l (A_aa theta_a + A_ab theta_b)`.
    r_a: DVector<f64>,
    groups: Vec<GroupSums>,
    centers: Vec<(String, usize)>,
    /// 0-based group of each pushed center, in push order.
    center_groups: Vec<usize>,
}

impl GroupedAccumulator {
    /// Accumulator where every pushed center gets its own copy of the
    /// stratified coordinates.
    pub fn stratified(
        family: Family,
        layout: ParamLayout,
        strat_param_indices: &[usize],
    ) -> Result<Self> {
        Self::new(family, layout, strat_param_indices, GroupKind::PerCenter)
    }

    /// Accumulator with a fixed number of clusters sharing the stratified
    /// coordinates; fits are pushed with a 1-based cluster label.
    pub fn clustered(
        family: Family,
        layout: ParamLayout,
        strat_param_indices: &[usize],
        clusters: usize,
    ) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::InvalidArgument(
                "cluster count must be positive".into(),
            ));
        }
        Self::new(family, layout, strat_param_indices, GroupKind::Cluster(clusters))
    }

    /// Adds one center. `cluster_label` is the 1-based cluster for a
    /// clustered accumulator and must be `None` for a stratified one.
    pub fn push(&mut self, fit: &LocalFit, cluster_label: Option<usize>) -> Result<()> {
        match (&self.kind, cluster_label) {
            (GroupKind::PerCenter, None) => self.push_with_group(fit, 0),
            (GroupKind::PerCenter, Some(_)) => Err(Error::InvalidArgument(
                "stratified accumulation takes no cluster label".into(),
            )),
            (GroupKind::Cluster(_), None) => Err(Error::InvalidArgument(
                "clustered accumulation needs a cluster label".into(),
            )),
            (GroupKind::Cluster(k), Some(label)) => {
                if label == 0 || label > *k {
                    return Err(Error::InvalidArgument(format!(
                        "cluster label {label} outside 1..={k}"
                    )));
                }
                self.push_with_group(fit, label - 1)
            }
        }
    }

    fn new(
        family: Family,
        layout: ParamLayout,
        strat_param_indices: &[usize],
        kind: GroupKind,
    ) -> Result<Self> {
        let d = layout.total_dim();
        let mut strat_idx = strat_param_indices.to_vec();
        strat_idx.sort_unstable();
        strat_idx.dedup();
        if strat_idx.len() != strat_param_indices.len() {
            return Err(Error::InvalidArgument(
                "stratified parameter indices contain duplicates".into(),
            ));
        }
        if strat_idx.last().is_some_and(|&i| i >= d) {
            return Err(Error::InvalidArgument(format!(
                "stratified parameter index out of range for layout of dimension {d}"
            )));
        }
        if strat_idx.is_empty() {
            return Err(Error::InvalidArgument(
                "grouped aggregation needs at least one group-specific coordinate".into(),
            ));
        }
        let shared_idx: Vec<usize> = (0..d).filter(|i| !strat_idx.contains(i)).collect();
        let p = shared_idx.len();
        let groups = match kind {
            GroupKind::PerCenter => Vec::new(),
            GroupKind::Cluster(k) => (0..k).map(|_| GroupSums::new(p, strat_idx.len())).collect(),
        };
        Ok(GroupedAccumulator {
            family,
            layout,
            kind,
            strat_idx,
            shared_idx,
            sum_a_aa: DMatrix::zeros(p, p),
            sum_lambda_aa: DMatrix::zeros(p, p),
            r_a: DVector::zeros(p),
            groups,
            centers: Vec::new(),
            center_groups: Vec::new(),
        })
    }

    /// Local priors must be block-diagonal across the shared/specific split;
    /// anything else has no meaning under independent priors.
    fn check_block_diagonal(&self, lambda: &DMatrix<f64>, what: &str) -> Result<()> {
        for &i in &self.shared_idx {
            for &j in &self.strat_idx {
                if lambda[(i, j)] != 0.0 || lambda[(j, i)] != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "{what} couples shared coordinate {i} with group-specific coordinate {j}; \
                         priors must be block-diagonal across that split"
                    )));
                }
            }
        }
        Ok(())
    }

    fn push_with_group(&mut self, fit: &LocalFit, group: usize) -> Result<()> {
        if fit.family != self.family || fit.layout != self.layout {
            return Err(Error::Incompatible(vec![format!(
                "center {}: family or layout differs from the accumulator",
                fit.center_id
            )]));
        }
        if self.centers.iter().any(|(id, _)| id == &fit.center_id) {
            return Err(Error::Incompatible(vec![format!(
                "duplicate center id {}",
                fit.center_id
            )]));
        }
        self.check_block_diagonal(&fit.lambda, &format!("local prior of center {}", fit.center_id))?;

        let a_aa = gather(&fit.a_hat, &self.shared_idx, &self.shared_idx);
        let a_bb = gather(&fit.a_hat, &self.strat_idx, &self.strat_idx);
        let a_ab = gather(&fit.a_hat, &self.shared_idx, &self.strat_idx);
        let theta_a = gather_vec(&fit.theta_hat, &self.shared_idx);
        let theta_b = gather_vec(&fit.theta_hat, &self.strat_idx);

        self.sum_a_aa += &a_aa;
        self.sum_lambda_aa += gather(&fit.lambda, &self.shared_idx, &self.shared_idx);
        self.r_a += &a_aa * &theta_a + &a_ab * &theta_b;

        let slot = match self.kind {
            GroupKind::PerCenter => {
                self.groups
                    .push(GroupSums::new(self.shared_idx.len(), self.strat_idx.len()));
                self.groups.len() - 1
            }
            GroupKind::Cluster(k) => {
                if group >= k {
                    return Err(Error::InvalidArgument(format!(
                        "cluster label {} out of range for K = {k}",
                        group + 1
                    )));
                }
                group
            }
        };
        let sums = &mut self.groups[slot];
        sums.b += &a_bb;
        sums.lambda_b += gather(&fit.lambda, &self.strat_idx, &self.strat_idx);
        sums.s += &a_bb * &theta_b + a_ab.transpose() * &theta_a;
        sums.c += &a_ab;
        sums.members += 1;
        sums.center_id = if sums.members == 1 {
            Some(fit.center_id.clone())
        } else {
            None
        };
        self.centers.push((fit.center_id.clone(), fit.n));
        self.center_groups.push(slot);
        Ok(())
    }

    /// Solves the accumulated block system against the combined prior.
    ///
    /// The combined prior's group blocks are matched to groups in push
    /// order; the sorted entry points below make that ascending center id.
    pub fn finalize(&self, lambda_combined: &PriorSpec) -> Result<BfiResult> {
        let p = self.shared_idx.len();
        let q = self.strat_idx.len();
        let n_groups = self.groups.len();
        if self.centers.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot combine an empty list of local fits".into(),
            ));
        }
        for (k, sums) in self.groups.iter().enumerate() {
            if sums.members == 0 {
                return Err(Error::InvalidArgument(format!(
                    "cluster {} has no contributing centers",
                    k + 1
                )));
            }
        }
        let dim = p + n_groups * q;
        if lambda_combined.dim() != dim {
            return Err(Error::DimensionMismatch {
                what: "combined prior precision matrix",
                expected: dim,
                got: lambda_combined.dim(),
            });
        }
        let lam = &lambda_combined.lambda;
        // combined prior must not couple shared, center- and cluster-blocks
        for i in 0..dim {
            for j in 0..dim {
                let bi = if i < p { usize::MAX } else { (i - p) / q };
                let bj = if j < p { usize::MAX } else { (j - p) / q };
                if bi != bj && lam[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument(
                        "combined prior couples coordinates across shared/group blocks; \
                         it must be block-diagonal in the combined layout"
                            .into(),
                    ));
                }
            }
        }

        // A_a = sum A_aa,l + Lambda_a - sum Lambda_aa,l
        let lam_aa = lam.view((0, 0), (p, p)).into_owned();
        let a_shared = &self.sum_a_aa + &lam_aa - &self.sum_lambda_aa;

        // per-group curvature blocks and their Cholesky factors
        let mut blocks = Vec::with_capacity(n_groups);
        for (k, sums) in self.groups.iter().enumerate() {
            let lam_b = lam.view((p + k * q, p + k * q), (q, q)).into_owned();
            let a_b = &sums.b + &lam_b - &sums.lambda_b;
            let chol = linalg::cholesky(&a_b, &format!("group-specific curvature block {}", k + 1))?;
            blocks.push((a_b, chol));
        }

        // Schur complement of the shared block and its right-hand side
        let mut schur = a_shared.clone();
        let mut rhs = self.r_a.clone();
        for (k, sums) in self.groups.iter().enumerate() {
            let chol = &blocks[k].1;
            let w = chol.solve(&sums.c.transpose()); // A_b^-1 C^t
            schur -= &sums.c * &w;
            rhs -= &sums.c * chol.solve(&sums.s);
        }
        mirror_upper(&mut schur);
        let theta_a = linalg::solve_spd(
            &schur,
            &rhs,
            "shared-block Schur complement (combined prior may be too small relative to the local priors)",
        )?;

        // group-specific estimates given the shared solution
        let mut theta = DVector::zeros(dim);
        for i in 0..p {
            theta[i] = theta_a[i];
        }
        for (k, sums) in self.groups.iter().enumerate() {
            let rhs_k = &sums.s - sums.c.transpose() * &theta_a;
            let theta_b = blocks[k].1.solve(&rhs_k);
            for j in 0..q {
                theta[p + k * q + j] = theta_b[j];
            }
        }

        // assemble the block-arrow combined curvature
        let mut a_full = DMatrix::zeros(dim, dim);
        for i in 0..p {
            for j in 0..p {
                a_full[(i, j)] = a_shared[(i, j)];
            }
        }
        for (k, sums) in self.groups.iter().enumerate() {
            for i in 0..p {
                for j in 0..q {
                    a_full[(i, p + k * q + j)] = sums.c[(i, j)];
                    a_full[(p + k * q + j, i)] = sums.c[(i, j)];
                }
            }
            for i in 0..q {
                for j in 0..q {
                    a_full[(p + k * q + i, p + k * q + j)] = blocks[k].0[(i, j)];
                }
            }
        }
        let sd = sd_from_curvature(&a_full, "combined curvature")?;

        let names = self.layout.coord_names();
        let mut labels: Vec<CoordLabel> = self
            .shared_idx
            .iter()
            .map(|&i| CoordLabel {
                name: names[i].clone(),
                scope: CoordScope::Shared,
            })
            .collect();
        for (k, sums) in self.groups.iter().enumerate() {
            let scope = match self.kind {
                GroupKind::PerCenter => CoordScope::Center(
                    sums.center_id
                        .clone()
                        .unwrap_or_else(|| format!("group{}", k + 1)),
                ),
                GroupKind::Cluster(_) => CoordScope::Cluster(k + 1),
            };
            for &i in &self.strat_idx {
                labels.push(CoordLabel {
                    name: names[i].clone(),
                    scope: scope.clone(),
                });
            }
        }

        let mode = match self.kind {
            GroupKind::PerCenter => StructureMode::Stratified {
                param_indices: self.strat_idx.clone(),
            },
            GroupKind::Cluster(k) => StructureMode::Clustered {
                cluster_of_center: self
                    .centers
                    .iter()
                    .map(|(id, _)| id.clone())
                    .zip(self.center_groups.iter().map(|g| g + 1))
                    .collect(),
                clusters: k,
            },
        };
        Ok(BfiResult {
            theta,
            a_matrix: a_full,
            sd,
            labels,
            structure: StructureSpec {
                mode,
                lambda_combined: lambda_combined.clone(),
            },
            centers: self.centers.clone(),
            family: self.family.clone(),
            layout: self.layout.clone(),
        })
    }

}

/// Aggregates local fits when the listed layout coordinates are
/// center-specific in the combined model.
///
/// The combined layout is: shared coordinates in local order, then the
/// stratified coordinates of each center, ascending by center id. The
/// combined prior must be given in that layout.
pub fn combine_stratified(
    fits: &[LocalFit],
    lambda_combined: &PriorSpec,
    strat_param_indices: &[usize],
) -> Result<BfiResult> {
    if strat_param_indices.is_empty() {
        // nothing varies between centers
        return combine_homogeneous(fits, lambda_combined);
    }
    let sorted = sorted_by_id(fits);
    check_fits(&sorted)?;
    let mut acc = GroupedAccumulator::stratified(
        sorted[0].family.clone(),
        sorted[0].layout.clone(),
        strat_param_indices,
    )?;
    for fit in sorted {
        acc.push(fit, None)?;
    }
    acc.finalize(lambda_combined)
}

/// Aggregates local fits when the intercept is cluster-specific.
///
/// `cluster_of_center` maps every contributing center id to a 1-based
/// cluster label covering `1..=clusters`; a cluster without centers is an
/// error. The combined layout is: shared coordinates in local order, then
/// one intercept per cluster in label order.
pub fn combine_clustered(
    fits: &[LocalFit],
    lambda_combined: &PriorSpec,
    cluster_of_center: &BTreeMap<String, usize>,
    clusters: usize,
) -> Result<BfiResult> {
    let sorted = sorted_by_id(fits);
    check_fits(&sorted)?;
    let layout = &sorted[0].layout;
    if layout.intercepts.len() != 1 {
        return Err(Error::InvalidArgument(
            "clustered aggregation needs local fits with an intercept".into(),
        ));
    }
    let mut acc = GroupedAccumulator::clustered(
        sorted[0].family.clone(),
        layout.clone(),
        &[0],
        clusters,
    )?;
    for fit in sorted {
        let label = cluster_of_center.get(&fit.center_id).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "center {} has no cluster label",
                fit.center_id
            ))
        })?;
        acc.push(fit, Some(*label))?;
    }
    acc.finalize(lambda_combined)
}

/// Intercept and slope of the least-squares line through per-center
/// intercepts plotted against a continuous center-level covariate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterCovariateLine {
    pub nu0: f64,
    pub nu1: f64,
}

/// Recovers the effect of a covariate that is constant within centers by
/// regressing the center-specific intercepts on its per-center values.
pub fn fit_center_covariate(intercepts: &[f64], z: &[f64]) -> Result<CenterCovariateLine> {
    let l = intercepts.len();
    if l != z.len() {
        return Err(Error::DimensionMismatch {
            what: "center covariate values",
            expected: l,
            got: z.len(),
        });
    }
    if l < 2 {
        return Err(Error::InvalidArgument(
            "need at least two centers to fit a line".into(),
        ));
    }
    let zbar = z.iter().sum::<f64>() / l as f64;
    let bbar = intercepts.iter().sum::<f64>() / l as f64;
    let mut szz = 0.0;
    let mut szb = 0.0;
    for i in 0..l {
        szz += (z[i] - zbar) * (z[i] - zbar);
        szb += (z[i] - zbar) * (intercepts[i] - bbar);
    }
    if szz == 0.0 {
        return Err(Error::InvalidArgument(
            "constant center covariate: slope is unidentifiable".into(),
        ));
    }
    let nu1 = szb / szz;
    Ok(CenterCovariateLine {
        nu0: bbar - nu1 * zbar,
        nu1,
    })
}
