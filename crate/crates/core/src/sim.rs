//! Simulation benchmark: synthetic multi-center designs, replicated
//! estimation with all one-shot estimators, and MSE metrics against the
//! pooled-data fit and against the truth.
//!
//! Replicates are embarrassingly parallel; all randomness is counter-based
//! per `(seed, replicate, center, stream)`, so results are identical for
//! any thread count, and metric reductions run in ascending replicate
//! order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::combine::{
    combine_clustered, combine_homogeneous, combine_stratified, CoordLabel, CoordScope,
    StructureMode,
};
use crate::error::{Error, Result};
use crate::fit::{map_estimate, newton_map, LocalFit};
use crate::glm::{sigmoid, Dataset, Design, Family, ParamLayout};
use crate::inference::{single_center_estimate, upper_quantile, wav_estimate};
use crate::prior::{build_prior, LambdaSpec, Stratification};
use crate::rng::{stream_rng, Stream};

/// Distribution of one simulated covariate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CovariateDist {
    Gaussian { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
}

/// One simulated center: sample size, covariate distributions and the
/// diagonal prior precision used for its local fit.
#[derive(Clone, Debug)]
pub struct CenterSpec {
    pub n: usize,
    pub covariates: Vec<CovariateDist>,
    pub lambda: f64,
}

/// True intercept structure across centers.
#[derive(Clone, Debug)]
pub enum InterceptTruth {
    Common(f64),
    PerCenter(Vec<f64>),
    PerCluster {
        values: Vec<f64>,
        /// 1-based cluster of each center.
        cluster_of_center: Vec<usize>,
    },
}

/// A full simulation configuration.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub family: Family,
    pub covariate_names: Vec<String>,
    pub centers: Vec<CenterSpec>,
    /// Shared true covariate coefficients.
    pub coefficients: Vec<f64>,
    pub intercepts: InterceptTruth,
    /// True log error variance, for the family that estimates it.
    pub log_var: Option<f64>,
    /// Diagonal prior precision for the fictive combined fit.
    pub lambda_combined: f64,
    pub seed: u64,
    /// Center whose fit serves as the single-center baseline; `None` picks
    /// the largest center, ties toward the lowest id.
    pub single_center_pin: Option<String>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.centers.is_empty() {
            return Err(Error::InvalidArgument("scenario needs centers".into()));
        }
        if self.coefficients.len() != self.covariate_names.len() {
            return Err(Error::DimensionMismatch {
                what: "true coefficients",
                expected: self.covariate_names.len(),
                got: self.coefficients.len(),
            });
        }
        for (i, c) in self.centers.iter().enumerate() {
            if c.n == 0 {
                return Err(Error::InvalidArgument(format!("center {i} has n = 0")));
            }
            if !(c.lambda.is_finite() && c.lambda > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "center {i} has non-positive lambda"
                )));
            }
            if c.covariates.len() != self.covariate_names.len() {
                return Err(Error::DimensionMismatch {
                    what: "covariate distributions",
                    expected: self.covariate_names.len(),
                    got: c.covariates.len(),
                });
            }
            for dist in &c.covariates {
                match dist {
                    CovariateDist::Gaussian { sd, .. } if *sd <= 0.0 => {
                        return Err(Error::InvalidArgument("covariate sd must be > 0".into()))
                    }
                    CovariateDist::Bernoulli { p } if !(*p > 0.0 && *p < 1.0) => {
                        return Err(Error::InvalidArgument(
                            "covariate probability must lie in (0, 1)".into(),
                        ))
                    }
                    _ => {}
                }
            }
        }
        if !(self.lambda_combined.is_finite() && self.lambda_combined > 0.0) {
            return Err(Error::InvalidArgument(
                "combined lambda must be positive".into(),
            ));
        }
        match &self.intercepts {
            InterceptTruth::Common(_) => {}
            InterceptTruth::PerCenter(values) => {
                if values.len() != self.centers.len() {
                    return Err(Error::DimensionMismatch {
                        what: "per-center intercepts",
                        expected: self.centers.len(),
                        got: values.len(),
                    });
                }
            }
            InterceptTruth::PerCluster {
                values,
                cluster_of_center,
            } => {
                let k = values.len();
                if cluster_of_center.len() != self.centers.len() {
                    return Err(Error::DimensionMismatch {
                        what: "cluster labels",
                        expected: self.centers.len(),
                        got: cluster_of_center.len(),
                    });
                }
                for label in cluster_of_center {
                    if *label == 0 || *label > k {
                        return Err(Error::InvalidArgument(format!(
                            "cluster label {label} outside 1..={k}"
                        )));
                    }
                }
                for cluster in 1..=k {
                    if !cluster_of_center.contains(&cluster) {
                        return Err(Error::InvalidArgument(format!(
                            "cluster {cluster} has no centers"
                        )));
                    }
                }
            }
        }
        if matches!(self.family, Family::GaussianEstVar) && self.log_var.is_none() {
            return Err(Error::InvalidArgument(
                "scenario with estimated variance needs a true log variance".into(),
            ));
        }
        Ok(())
    }

    pub fn center_id(&self, index: usize) -> String {
        format!("c{:02}", index + 1)
    }

    /// Local model layout shared by all centers.
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::with_intercept(
            self.covariate_names.clone(),
            self.family.nuisance_count() == 1,
        )
    }

    /// Aggregation structure implied by the intercept truth.
    pub fn mode(&self) -> StructureMode {
        match &self.intercepts {
            InterceptTruth::Common(_) => StructureMode::Homogeneous,
            InterceptTruth::PerCenter(_) => StructureMode::Stratified {
                param_indices: vec![0],
            },
            InterceptTruth::PerCluster {
                values,
                cluster_of_center,
            } => StructureMode::Clustered {
                cluster_of_center: (0..self.centers.len())
                    .map(|i| (self.center_id(i), cluster_of_center[i]))
                    .collect(),
                clusters: values.len(),
            },
        }
    }

    fn true_intercept(&self, center: usize) -> f64 {
        match &self.intercepts {
            InterceptTruth::Common(v) => *v,
            InterceptTruth::PerCenter(values) => values[center],
            InterceptTruth::PerCluster {
                values,
                cluster_of_center,
            } => values[cluster_of_center[center] - 1],
        }
    }

    /// True parameter vector in the combined layout, with labels.
    pub fn truth(&self) -> (DVector<f64>, Vec<CoordLabel>) {
        let shared_tail: Vec<(f64, String)> = self
            .coefficients
            .iter()
            .zip(&self.covariate_names)
            .map(|(c, n)| (*c, n.clone()))
            .chain(self.log_var.map(|r| (r, "log_var".to_string())))
            .collect();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        match &self.intercepts {
            InterceptTruth::Common(v) => {
                values.push(*v);
                labels.push(CoordLabel {
                    name: "intercept".into(),
                    scope: CoordScope::Shared,
                });
                for (v, n) in &shared_tail {
                    values.push(*v);
                    labels.push(CoordLabel {
                        name: n.clone(),
                        scope: CoordScope::Shared,
                    });
                }
            }
            InterceptTruth::PerCenter(ints) => {
                for (v, n) in &shared_tail {
                    values.push(*v);
                    labels.push(CoordLabel {
                        name: n.clone(),
                        scope: CoordScope::Shared,
                    });
                }
                for (i, v) in ints.iter().enumerate() {
                    values.push(*v);
                    labels.push(CoordLabel {
                        name: "intercept".into(),
                        scope: CoordScope::Center(self.center_id(i)),
                    });
                }
            }
            InterceptTruth::PerCluster { values: ints, .. } => {
                for (v, n) in &shared_tail {
                    values.push(*v);
                    labels.push(CoordLabel {
                        name: n.clone(),
                        scope: CoordScope::Shared,
                    });
                }
                for (k, v) in ints.iter().enumerate() {
                    values.push(*v);
                    labels.push(CoordLabel {
                        name: "intercept".into(),
                        scope: CoordScope::Cluster(k + 1),
                    });
                }
            }
        }
        (DVector::from_vec(values), labels)
    }

    /// Copy with every center's sample size replaced.
    pub fn with_sample_sizes(&self, sizes: &[usize]) -> Result<Scenario> {
        if sizes.len() != self.centers.len() {
            return Err(Error::DimensionMismatch {
                what: "sample sizes",
                expected: self.centers.len(),
                got: sizes.len(),
            });
        }
        let mut out = self.clone();
        for (c, &n) in out.centers.iter_mut().zip(sizes) {
            c.n = n;
        }
        Ok(out)
    }

    /// Copy with every prior precision (local and combined) replaced.
    pub fn with_lambda(&self, lambda: f64) -> Scenario {
        let mut out = self.clone();
        for c in out.centers.iter_mut() {
            c.lambda = lambda;
        }
        out.lambda_combined = lambda;
        out
    }

    /// Copy with a different master seed.
    pub fn with_seed(&self, seed: u64) -> Scenario {
        let mut out = self.clone();
        out.seed = seed;
        out
    }
}

/// The four standard benchmark designs: four centers, three covariates,
/// logistic outcomes.
///
/// * `table1` — homogeneous; covariates N(0,1), N(2,5), Bernoulli(0.25),
///   true parameters 1.0 (intercept), 2.0, -1.0, 0.5.
/// * `table2` — heterogeneous covariate distributions: first covariate
///   means 0/1/2/3 (sd 1), second sd 1/2/3/4 (mean 2), Bernoulli
///   probabilities 0.35/0.30/0.25/0.20.
/// * `table3` — center-specific intercepts 0.0/1.0/0.5/-1.0.
/// * `table4` — clusters {1,2} and {3,4} with intercepts 1.0/2.0.
pub fn named_scenario(name: &str, seed: u64) -> Result<Scenario> {
    let homogeneous_covs = || {
        vec![
            CovariateDist::Gaussian { mean: 0.0, sd: 1.0 },
            CovariateDist::Gaussian { mean: 2.0, sd: 5.0 },
            CovariateDist::Bernoulli { p: 0.25 },
        ]
    };
    let sizes = [100usize, 100, 200, 200];
    let lambda = 0.01;
    let centers_with = |covs: &dyn Fn(usize) -> Vec<CovariateDist>| -> Vec<CenterSpec> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| CenterSpec {
                n,
                covariates: covs(i),
                lambda,
            })
            .collect()
    };
    let base = Scenario {
        name: name.to_string(),
        family: Family::BinomialLogit,
        covariate_names: vec!["x1".into(), "x2".into(), "x3".into()],
        centers: centers_with(&|_| homogeneous_covs()),
        coefficients: vec![2.0, -1.0, 0.5],
        intercepts: InterceptTruth::Common(1.0),
        log_var: None,
        lambda_combined: lambda,
        seed,
            single_center_pin: None,
    };
    let scenario = match name {
        "table1" => base,
        "table2" => Scenario {
            centers: centers_with(&|i| {
                vec![
                    CovariateDist::Gaussian {
                        mean: i as f64,
                        sd: 1.0,
                    },
                    CovariateDist::Gaussian {
                        mean: 2.0,
                        sd: (i + 1) as f64,
                    },
                    CovariateDist::Bernoulli {
                        p: 0.35 - 0.05 * i as f64,
                    },
                ]
            }),
            ..base
        },
        "table3" => Scenario {
            intercepts: InterceptTruth::PerCenter(vec![0.0, 1.0, 0.5, -1.0]),
            ..base
        },
        "table4" => Scenario {
            intercepts: InterceptTruth::PerCluster {
                values: vec![1.0, 2.0],
                cluster_of_center: vec![1, 1, 2, 2],
            },
            ..base
        },
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown scenario {other}; available: table1, table2, table3, table4"
            )))
        }
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Draws one center's data for one replicate, deterministically in
/// `(scenario.seed, rep, center)`.
pub fn generate_center_data(scenario: &Scenario, center: usize, rep: u64) -> Result<Dataset> {
    scenario.validate()?;
    let spec = scenario
        .centers
        .get(center)
        .ok_or_else(|| Error::InvalidArgument(format!("center {center} out of range")))?;
    let mut rng_cov = stream_rng(scenario.seed, rep, center as u64, Stream::Covariates);
    let mut rng_out = stream_rng(scenario.seed, rep, center as u64, Stream::Outcomes);

    let n = spec.n;
    let p = spec.covariates.len();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for (j, dist) in spec.covariates.iter().enumerate() {
            x[(i, j)] = match dist {
                CovariateDist::Gaussian { mean, sd } => {
                    Normal::new(*mean, *sd).unwrap().sample(&mut rng_cov)
                }
                CovariateDist::Bernoulli { p } => f64::from(rng_cov.gen_bool(*p)),
            };
        }
    }
    let intercept = scenario.true_intercept(center);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let mut eta = intercept;
        for j in 0..p {
            eta += scenario.coefficients[j] * x[(i, j)];
        }
        y[i] = match &scenario.family {
            Family::BinomialLogit => f64::from(rng_out.gen_bool(sigmoid(eta))),
            Family::GaussianFixedVar { sigma2 } => {
                eta + sigma2.sqrt() * Normal::new(0.0, 1.0).unwrap().sample(&mut rng_out)
            }
            Family::GaussianEstVar => {
                let sd = (scenario.log_var.unwrap() / 2.0).exp();
                eta + sd * Normal::new(0.0, 1.0).unwrap().sample(&mut rng_out)
            }
        };
    }
    Dataset::new(scenario.center_id(center), y, x)
}

/// Estimates from one replicate, in the combined layout. `None` estimates
/// under `failed = false` mean "not defined for this structure" (the
/// single-center baseline under heterogeneity).
#[derive(Clone, Debug)]
pub struct RepResult {
    pub rep: usize,
    pub truth: DVector<f64>,
    pub bfi: Option<DVector<f64>>,
    pub bfi_sd: Option<DVector<f64>>,
    pub wav: Option<DVector<f64>>,
    pub single: Option<DVector<f64>>,
    pub combined: Option<DVector<f64>>,
    pub failed: bool,
}

/// Which estimator a metric refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Bfi,
    Wav,
    Single,
    Combined,
}

impl Estimator {
    pub fn tag(&self) -> &'static str {
        match self {
            Estimator::Bfi => "bfi",
            Estimator::Wav => "wav",
            Estimator::Single => "single",
            Estimator::Combined => "combined",
        }
    }
}

impl RepResult {
    fn estimate(&self, which: Estimator) -> Option<&DVector<f64>> {
        match which {
            Estimator::Bfi => self.bfi.as_ref(),
            Estimator::Wav => self.wav.as_ref(),
            Estimator::Single => self.single.as_ref(),
            Estimator::Combined => self.combined.as_ref(),
        }
    }
}

/// Fits every center, the pooled data, and all one-shot estimators for one
/// replicate.
pub fn run_replication(scenario: &Scenario, rep: u64) -> Result<RepResult> {
    scenario.validate()?;
    let layout = scenario.layout();
    let mode = scenario.mode();
    let (truth, _) = scenario.truth();
    let l = scenario.centers.len();

    let mut datasets = Vec::with_capacity(l);
    for c in 0..l {
        datasets.push(generate_center_data(scenario, c, rep)?);
    }

    let mut fits: Vec<LocalFit> = Vec::with_capacity(l);
    let mut all_converged = true;
    for (c, data) in datasets.iter().enumerate() {
        let prior = build_prior(
            &layout,
            &LambdaSpec::Scalar(scenario.centers[c].lambda),
            Stratification::None,
        )?;
        let fit = map_estimate(&scenario.family, data, &prior)?;
        all_converged &= fit.converged;
        fits.push(fit);
    }

    // pooled design and combined prior in the combined layout
    let (strat, group_of_center): (Stratification, Vec<usize>) = match &mode {
        StructureMode::Homogeneous => (Stratification::None, vec![0; l]),
        StructureMode::Stratified { param_indices } => (
            Stratification::CenterSpecific {
                param_indices: param_indices.clone(),
                centers: l,
            },
            (0..l).collect(),
        ),
        StructureMode::Clustered {
            cluster_of_center,
            clusters,
        } => (
            Stratification::Clustered {
                param_indices: vec![0],
                clusters: *clusters,
            },
            (0..l)
                .map(|i| cluster_of_center[&scenario.center_id(i)] - 1)
                .collect(),
        ),
    };
    let n_groups = match &strat {
        Stratification::None => 1,
        Stratification::CenterSpecific { centers, .. } => *centers,
        Stratification::Clustered { clusters, .. } => *clusters,
    };
    let combined_prior = build_prior(
        &layout,
        &LambdaSpec::Scalar(scenario.lambda_combined),
        strat.clone(),
    )?;
    let parts: Vec<(&Dataset, usize)> = datasets
        .iter()
        .zip(&group_of_center)
        .map(|(d, &g)| (d, g))
        .collect();
    let group_coords: &[usize] = match &strat {
        Stratification::None => &[],
        _ => &[0],
    };
    let pooled = Design::pooled(&parts, &layout, group_coords, n_groups)?;
    let pooled_fit = newton_map(&scenario.family, &pooled, &combined_prior.lambda)?;
    all_converged &= pooled_fit.converged;

    let bfi = match &mode {
        StructureMode::Homogeneous => combine_homogeneous(&fits, &combined_prior),
        StructureMode::Stratified { param_indices } => {
            combine_stratified(&fits, &combined_prior, param_indices)
        }
        StructureMode::Clustered {
            cluster_of_center,
            clusters,
        } => combine_clustered(&fits, &combined_prior, cluster_of_center, *clusters),
    };

    let wav = wav_estimate(&fits, &mode)?;
    // undefined (not failed) when any coordinate is center/cluster-specific
    let single = single_center_estimate(&fits, &mode, scenario.single_center_pin.as_deref())
        .ok()
        .map(|s| s.theta);

    let failed = !all_converged || bfi.is_err();
    let (bfi_theta, bfi_sd) = match bfi {
        Ok(result) => (Some(result.theta.clone()), Some(result.sd)),
        Err(_) => (None, None),
    };
    Ok(RepResult {
        rep: rep as usize,
        truth,
        bfi: bfi_theta,
        bfi_sd,
        wav: Some(wav.theta),
        single,
        combined: Some(pooled_fit.theta),
        failed,
    })
}

/// Runs `reps` replicates in parallel; the returned vector is in replicate
/// order regardless of scheduling.
pub fn run_many(scenario: &Scenario, reps: u64) -> Result<Vec<RepResult>> {
    scenario.validate()?;
    (0..reps)
        .into_par_iter()
        .map(|rep| run_replication(scenario, rep))
        .collect()
}

fn usable(results: &[RepResult], which: Estimator) -> impl Iterator<Item = &RepResult> {
    results
        .iter()
        .filter(move |r| !r.failed && r.estimate(which).is_some())
}

/// Per-coordinate mean squared deviation from the pooled-data estimate,
/// over usable replicates.
pub fn mse_vs_combined(results: &[RepResult], which: Estimator) -> Result<Vec<f64>> {
    accumulate_mse(results, which, |r| r.combined.as_ref())
}

/// Per-coordinate mean squared deviation from the true parameter values.
pub fn mset_vs_truth(results: &[RepResult], which: Estimator) -> Result<Vec<f64>> {
    accumulate_mse(results, which, |r| Some(&r.truth))
}

fn accumulate_mse<'a, F>(
    results: &'a [RepResult],
    which: Estimator,
    reference: F,
) -> Result<Vec<f64>>
where
    F: Fn(&'a RepResult) -> Option<&'a DVector<f64>>,
{
    let mut sums: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for r in usable(results, which) {
        let est = r.estimate(which).unwrap();
        let reference = reference(r).ok_or_else(|| {
            Error::InvalidArgument("replicate lacks a reference estimate".into())
        })?;
        if est.len() != reference.len() {
            return Err(Error::DimensionMismatch {
                what: "estimate vector",
                expected: reference.len(),
                got: est.len(),
            });
        }
        let sums = sums.get_or_insert_with(|| vec![0.0; est.len()]);
        for j in 0..est.len() {
            let d = est[j] - reference[j];
            sums[j] += d * d;
        }
        count += 1;
    }
    let sums = sums.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "no usable replicates for estimator {}",
            which.tag()
        ))
    })?;
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Number of replicates flagged as failed.
pub fn failed_count(results: &[RepResult]) -> usize {
    results.iter().filter(|r| r.failed).count()
}

/// Empirical coverage of the aggregated credible intervals, per
/// coordinate.
pub fn coverage_experiment(scenario: &Scenario, reps: u64, alpha: f64) -> Result<Vec<f64>> {
    let xi = upper_quantile(alpha)?;
    let results = run_many(scenario, reps)?;
    let mut hits: Option<Vec<usize>> = None;
    let mut count = 0usize;
    for r in results.iter().filter(|r| !r.failed) {
        let (Some(theta), Some(sd)) = (&r.bfi, &r.bfi_sd) else {
            continue;
        };
        let hits = hits.get_or_insert_with(|| vec![0; theta.len()]);
        for j in 0..theta.len() {
            if (theta[j] - r.truth[j]).abs() <= xi * sd[j] {
                hits[j] += 1;
            }
        }
        count += 1;
    }
    let hits =
        hits.ok_or_else(|| Error::InvalidArgument("no usable replicates".into()))?;
    Ok(hits.into_iter().map(|h| h as f64 / count as f64).collect())
}

/// One row of the benchmark summary.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub scenario: String,
    pub estimator: &'static str,
    pub coordinate: String,
    pub mse: f64,
    pub mset: f64,
    pub b_used: usize,
    pub b_failed: usize,
}

/// Summary table over finished replicates: one row per (estimator,
/// coordinate), with deviation from the pooled fit and from the truth.
pub fn metrics_table(scenario: &Scenario, results: &[RepResult]) -> Result<Vec<MetricsRow>> {
    let (_, labels) = scenario.truth();
    let b_failed = failed_count(results);
    let mut rows = Vec::new();
    for est in [Estimator::Bfi, Estimator::Wav, Estimator::Single] {
        let b_used = usable(results, est).count();
        if b_used == 0 {
            continue; // estimator undefined for this structure
        }
        let mse = mse_vs_combined(results, est)?;
        let mset = mset_vs_truth(results, est)?;
        for (j, label) in labels.iter().enumerate() {
            rows.push(MetricsRow {
                scenario: scenario.name.clone(),
                estimator: est.tag(),
                coordinate: label.to_string(),
                mse: mse[j],
                mset: mset[j],
                b_used,
                b_failed,
            });
        }
    }
    Ok(rows)
}
