#![allow(dead_code)] // shared across test binaries; each uses a subset

//! Shared generators and independent oracles for the integration suites.
//!
//! The oracles deliberately avoid the library's aggregation path: the
//! quadratic surrogate is assembled directly from the local summaries and
//! maximized by a dense LU solve, and pooled ridge fits are evaluated from
//! their closed form on an explicitly built design matrix.

use std::collections::BTreeMap;

use bfi_core::combine::{BfiResult, CoordScope};
use bfi_core::fit::{map_estimate, LocalFit};
use bfi_core::glm::{Dataset, Family, ParamLayout};
use bfi_core::prior::{build_prior, LambdaSpec, PriorSpec, Stratification};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn center_id(i: usize) -> String {
    format!("c{:02}", i + 1)
}

/// One synthetic multi-center problem with its fitted local summaries.
pub struct Instance {
    pub family: Family,
    pub layout: ParamLayout,
    pub datasets: Vec<Dataset>,
    pub fits: Vec<LocalFit>,
    pub lambda_local: f64,
}

pub fn random_instance(
    rng: &mut ChaCha8Rng,
    family: Family,
    l: usize,
    p: usize,
    n_per_center: std::ops::Range<usize>,
) -> Instance {
    let layout = ParamLayout::with_intercept(
        (0..p).map(|i| format!("x{}", i + 1)).collect(),
        family.nuisance_count() == 1,
    );
    let lambda_local = rng.gen_range(0.005..0.1);
    let prior = build_prior(&layout, &LambdaSpec::Scalar(lambda_local), Stratification::None)
        .unwrap();
    let truth: Vec<f64> = (0..p + 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut datasets = Vec::new();
    let mut fits = Vec::new();
    for c in 0..l {
        let n = rng.gen_range(n_per_center.clone());
        let x = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.5..1.5));
        let y = DVector::from_fn(n, |i, _| {
            let mut eta = truth[0];
            for j in 0..p {
                eta += truth[j + 1] * x[(i, j)];
            }
            match &family {
                Family::BinomialLogit => {
                    f64::from(rng.gen_bool(1.0 / (1.0 + (-eta).exp())))
                }
                Family::GaussianFixedVar { sigma2 } => {
                    eta + sigma2.sqrt() * rng.gen_range(-1.0..1.0) * 1.7
                }
                Family::GaussianEstVar => eta + rng.gen_range(-1.0..1.0),
            }
        });
        let data = Dataset::new(center_id(c), y, x).unwrap();
        let fit = map_estimate(&family, &data, &prior).unwrap();
        assert!(fit.converged, "local fit {c} did not converge");
        datasets.push(data);
        fits.push(fit);
    }
    Instance {
        family,
        layout,
        datasets,
        fits,
        lambda_local,
    }
}

impl Instance {
    pub fn combined_prior(&self, lambda: f64, strat: Stratification) -> PriorSpec {
        build_prior(&self.layout, &LambdaSpec::Scalar(lambda), strat).unwrap()
    }

    pub fn cluster_map(&self, group_of_center: &[usize]) -> BTreeMap<String, usize> {
        group_of_center
            .iter()
            .enumerate()
            .map(|(i, g)| (center_id(i), g + 1))
            .collect()
    }
}

/// The assembled gradient system of the quadratic surrogate: maximizer
/// solves `m x = r`.
pub struct QuadraticSystem {
    pub m: DMatrix<f64>,
    pub r: DVector<f64>,
}

impl QuadraticSystem {
    pub fn maximizer(&self) -> DVector<f64> {
        self.m
            .clone()
            .lu()
            .solve(&self.r)
            .expect("surrogate system must be solvable")
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.r - &self.m * x
    }
}

/// Surrogate system for a fully shared parameter vector.
pub fn omega_homogeneous(fits: &[LocalFit], lambda_combined: &DMatrix<f64>) -> QuadraticSystem {
    let d = lambda_combined.nrows();
    let mut m = lambda_combined.clone();
    let mut r = DVector::zeros(d);
    for fit in fits {
        m += &fit.a_hat;
        m -= &fit.lambda;
        r += &fit.a_hat * &fit.theta_hat;
    }
    QuadraticSystem { m, r }
}

/// Surrogate system when `strat` coordinates are specific to groups
/// (centers or clusters). `group_of_center[i]` is the 0-based group of the
/// i-th fit, in ascending-center-id order; coordinates are ordered shared
/// first, then per group.
pub fn omega_grouped(
    fits: &[LocalFit],
    lambda_combined: &DMatrix<f64>,
    strat: &[usize],
    group_of_center: &[usize],
    n_groups: usize,
) -> QuadraticSystem {
    let mut fits_sorted: Vec<(usize, &LocalFit)> = fits.iter().enumerate().collect();
    fits_sorted.sort_by(|a, b| a.1.center_id.cmp(&b.1.center_id));

    let d_local = fits[0].layout.total_dim();
    let mut strat = strat.to_vec();
    strat.sort_unstable();
    let shared: Vec<usize> = (0..d_local).filter(|i| !strat.contains(i)).collect();
    let p = shared.len();
    let q = strat.len();
    let dim = p + n_groups * q;
    assert_eq!(lambda_combined.nrows(), dim);

    let mut m = lambda_combined.clone();
    let mut r = DVector::zeros(dim);
    for (orig_idx, fit) in &fits_sorted {
        let g = group_of_center[*orig_idx];
        // position of each local coordinate in the combined system
        let pos = |local: usize| -> usize {
            if let Some(k) = shared.iter().position(|&s| s == local) {
                k
            } else {
                let k = strat.iter().position(|&s| s == local).unwrap();
                p + g * q + k
            }
        };
        for i in 0..d_local {
            for j in 0..d_local {
                m[(pos(i), pos(j))] += fit.a_hat[(i, j)] - fit.lambda[(i, j)];
            }
            let mut ri = 0.0;
            for j in 0..d_local {
                ri += fit.a_hat[(i, j)] * fit.theta_hat[j];
            }
            r[pos(i)] += ri;
        }
    }
    QuadraticSystem { m, r }
}

/// Closed-form pooled ridge fit for the Gaussian family with known
/// variance, on the design implied by a combined result's labels.
///
/// Builds one column per combined coordinate: shared intercepts are ones,
/// center/cluster-scoped coordinates are masked to the matching rows.
pub fn pooled_ridge_oracle(
    datasets: &[Dataset],
    layout: &ParamLayout,
    result: &BfiResult,
    sigma2: f64,
    lambda_combined: &DMatrix<f64>,
    cluster_of_center: Option<&BTreeMap<String, usize>>,
) -> DVector<f64> {
    let n_total: usize = datasets.iter().map(|d| d.n()).sum();
    let dim = result.dim();
    let names = layout.coord_names();
    let mut z = DMatrix::zeros(n_total, dim);
    let mut y = DVector::zeros(n_total);

    let mut row = 0;
    for data in datasets {
        for i in 0..data.n() {
            y[row] = data.y[i];
            for (j, label) in result.labels.iter().enumerate() {
                let active = match &label.scope {
                    CoordScope::Shared => true,
                    CoordScope::Center(id) => id == &data.center_id,
                    CoordScope::Cluster(k) => {
                        cluster_of_center.expect("cluster map required")[&data.center_id] == *k
                    }
                };
                if !active {
                    continue;
                }
                let local = names
                    .iter()
                    .position(|n| n == &label.name)
                    .expect("label must name a local coordinate");
                let k_int = layout.intercepts.len();
                z[(row, j)] = if local < k_int {
                    1.0
                } else {
                    data.x[(i, local - k_int)]
                };
            }
            row += 1;
        }
    }
    let lhs = z.transpose() * &z / sigma2 + lambda_combined;
    let rhs = z.transpose() * &y / sigma2;
    lhs.lu().solve(&rhs).expect("ridge system must be solvable")
}

/// Componentwise max absolute difference.
pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}
