//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them).
//!
//! Every tolerance is pinned here, in code. Monte Carlo criteria use fixed
//! seeds and are reproducible bit-for-bit.

mod support;

use std::io::Write as _;

use bfi_core::combine::{
    combine_clustered, combine_homogeneous, combine_stratified, CoordScope,
};
use bfi_core::glm::{Dataset, Design, Family, ParamLayout};
use bfi_core::inference::{pooled_standardization, SummaryStats};
use bfi_core::message::{deserialize_local_fit, deserialize_local_fit_lenient, serialize_local_fit};
use bfi_core::prior::Stratification;
use bfi_core::sim::{
    coverage_experiment, mse_vs_combined, mset_vs_truth, named_scenario, run_many, Estimator,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{max_abs_diff, omega_grouped, omega_homogeneous, random_instance};

fn pass(criterion: &str, detail: String) {
    println!("ACCEPTANCE {criterion}: PASS ({detail})");
    std::io::stdout().flush().ok();
}

/// Random multi-center Gaussian-known-variance problem plus the matching
/// pooled-ridge oracle evaluation for any of the three rules.
fn gaussian_exactness_case(
    rng: &mut ChaCha8Rng,
    rule: &str,
) -> (f64, usize) {
    let sigma2 = rng.gen_range(0.4..2.0);
    let family = Family::gaussian_fixed(sigma2).unwrap();
    let l = rng.gen_range(if rule == "homogeneous" { 1 } else { 2 }..6usize);
    let p = rng.gen_range(0..7); // d = p + 1 <= 8 locally
    let instance = random_instance(rng, family, l, p, 10..30);
    let lambda_c = rng.gen_range(0.01..0.2);

    let (result, cluster_map) = match rule {
        "homogeneous" => {
            let prior = instance.combined_prior(lambda_c, Stratification::None);
            (combine_homogeneous(&instance.fits, &prior).unwrap(), None)
        }
        "stratified" => {
            let d = instance.layout.total_dim();
            let n_strat = rng.gen_range(1..=d.min(2));
            let mut coords: Vec<usize> = (0..d).collect();
            for i in (1..coords.len()).rev() {
                coords.swap(i, rng.gen_range(0..=i));
            }
            coords.truncate(n_strat);
            coords.sort_unstable();
            let prior = instance.combined_prior(
                lambda_c,
                Stratification::CenterSpecific {
                    param_indices: coords.clone(),
                    centers: l,
                },
            );
            (
                combine_stratified(&instance.fits, &prior, &coords).unwrap(),
                None,
            )
        }
        "clustered" => {
            let k = rng.gen_range(1..=l);
            // every cluster non-empty: first k centers take distinct labels
            let groups: Vec<usize> =
                (0..l).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
            let map = instance.cluster_map(&groups);
            let prior = instance.combined_prior(
                lambda_c,
                Stratification::Clustered {
                    param_indices: vec![0],
                    clusters: k,
                },
            );
            (
                combine_clustered(&instance.fits, &prior, &map, k).unwrap(),
                Some(map),
            )
        }
        other => panic!("unknown rule {other}"),
    };
    let oracle = support::pooled_ridge_oracle(
        &instance.datasets,
        &instance.layout,
        &result,
        sigma2,
        &result.structure.lambda_combined.lambda,
        cluster_map.as_ref(),
    );
    (max_abs_diff(&result.theta, &oracle), result.dim())
}

#[test]
fn acceptance_01_quadratic_posterior_exactness() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    for rule in ["homogeneous", "stratified", "clustered"] {
        for _ in 0..50 {
            let (err, _) = gaussian_exactness_case(&mut rng, rule);
            assert!(err < 1e-8, "{rule}: pooled ridge mismatch {err:.3e}");
            worst = worst.max(err);
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 5.0,
        "exactness sweep took {elapsed:?}"
    );
    pass(
        "01 quadratic-posterior exactness",
        format!("150 instances, worst max-abs error {worst:.2e}, {elapsed:.2?}"),
    );
}

#[test]
fn acceptance_02_surrogate_maximizer_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let l = rng.gen_range(2..5);
        let p = rng.gen_range(1..3);
        let instance = random_instance(&mut rng, Family::BinomialLogit, l, p, 20..50);
        let lambda_c = rng.gen_range(0.01..0.1);

        let prior = instance.combined_prior(lambda_c, Stratification::None);
        let hom = combine_homogeneous(&instance.fits, &prior).unwrap();
        let g = omega_homogeneous(&instance.fits, &prior.lambda).gradient(&hom.theta);
        assert!(g.amax() < 1e-8, "homogeneous gradient {:.3e}", g.amax());
        worst = worst.max(g.amax());

        let strat = vec![rng.gen_range(0..instance.layout.total_dim())];
        let prior_s = instance.combined_prior(
            lambda_c,
            Stratification::CenterSpecific {
                param_indices: strat.clone(),
                centers: l,
            },
        );
        let st = combine_stratified(&instance.fits, &prior_s, &strat).unwrap();
        let groups: Vec<usize> = (0..l).collect();
        let g = omega_grouped(&instance.fits, &prior_s.lambda, &strat, &groups, l)
            .gradient(&st.theta);
        assert!(g.amax() < 1e-8, "stratified gradient {:.3e}", g.amax());
        worst = worst.max(g.amax());

        let k = rng.gen_range(1..=l);
        let groups: Vec<usize> =
            (0..l).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
        let map = instance.cluster_map(&groups);
        let prior_k = instance.combined_prior(
            lambda_c,
            Stratification::Clustered {
                param_indices: vec![0],
                clusters: k,
            },
        );
        let cl = combine_clustered(&instance.fits, &prior_k, &map, k).unwrap();
        let g = omega_grouped(&instance.fits, &prior_k.lambda, &[0], &groups, k)
            .gradient(&cl.theta);
        assert!(g.amax() < 1e-8, "clustered gradient {:.3e}", g.amax());
        worst = worst.max(g.amax());
    }
    pass(
        "02 surrogate-maximizer oracle",
        format!("50 logistic instances x 3 rules, worst gradient {worst:.2e}"),
    );
}

#[test]
fn acceptance_03_reduction_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        // clustered with K = 1 against homogeneous
        let l = rng.gen_range(2..5);
        let instance = random_instance(&mut rng, Family::BinomialLogit, l, 2, 20..45);
        let prior_h = instance.combined_prior(0.03, Stratification::None);
        let hom = combine_homogeneous(&instance.fits, &prior_h).unwrap();
        let prior_1 = instance.combined_prior(
            0.03,
            Stratification::Clustered {
                param_indices: vec![0],
                clusters: 1,
            },
        );
        let map = instance.cluster_map(&vec![0; l]);
        let cl = combine_clustered(&instance.fits, &prior_1, &map, 1).unwrap();
        for (j, label) in cl.labels.iter().enumerate() {
            let hj = hom.labels.iter().position(|m| m.name == label.name).unwrap();
            let diff = (cl.theta[j] - hom.theta[hj]).abs();
            assert!(diff < 1e-10, "{label}: K=1 vs homogeneous {diff:.3e}");
            worst = worst.max(diff);
        }
    }
    for _ in 0..20 {
        // clustered with K = L against stratified intercepts
        let l = rng.gen_range(2..5);
        let instance = random_instance(&mut rng, Family::BinomialLogit, l, 2, 20..45);
        let prior_s = instance.combined_prior(
            0.02,
            Stratification::CenterSpecific {
                param_indices: vec![0],
                centers: l,
            },
        );
        let st = combine_stratified(&instance.fits, &prior_s, &[0]).unwrap();
        let prior_k = instance.combined_prior(
            0.02,
            Stratification::Clustered {
                param_indices: vec![0],
                clusters: l,
            },
        );
        let map = instance.cluster_map(&(0..l).collect::<Vec<_>>());
        let cl = combine_clustered(&instance.fits, &prior_k, &map, l).unwrap();
        let diff = max_abs_diff(&st.theta, &cl.theta);
        assert!(diff < 1e-10, "K=L vs stratified {diff:.3e}");
        worst = worst.max(diff);
    }
    pass(
        "03 reduction equivalences",
        format!("20 + 20 instances, worst deviation {worst:.2e}"),
    );
}

#[test]
fn acceptance_04_homogeneous_benchmark_pattern() {
    let start = std::time::Instant::now();
    let scenario = named_scenario("table1", 20240).unwrap();
    let results = run_many(&scenario, 200).unwrap();
    let mse_bfi = mse_vs_combined(&results, Estimator::Bfi).unwrap();
    let mse_wav = mse_vs_combined(&results, Estimator::Wav).unwrap();
    let mse_single = mse_vs_combined(&results, Estimator::Single).unwrap();
    // published magnitudes for this design (100 x MSE: 0.80 2.64 0.64 0.60)
    let reference = [0.0080, 0.0264, 0.0064, 0.0060];
    for j in 0..4 {
        assert!(
            mse_bfi[j] < mse_wav[j] && mse_wav[j] < mse_single[j],
            "coordinate {j}: ordering violated ({:.4e} / {:.4e} / {:.4e})",
            mse_bfi[j],
            mse_wav[j],
            mse_single[j]
        );
        assert!(
            mse_bfi[j] > reference[j] / 5.0 && mse_bfi[j] < reference[j] * 5.0,
            "coordinate {j}: MSE {:.4e} outside factor 5 of {:.4e}",
            mse_bfi[j],
            reference[j]
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 180.0, "benchmark took {elapsed:?}");
    pass(
        "04 homogeneous benchmark pattern",
        format!(
            "B=200, MSE ordering bfi<wav<single holds; bfi = {:?} vs reference {:?}, {elapsed:.2?}",
            mse_bfi, reference
        ),
    );
}

#[test]
fn acceptance_05_center_intercept_benchmark_pattern() {
    let scenario = named_scenario("table3", 20250).unwrap();
    let results = run_many(&scenario, 200).unwrap();
    let mse_bfi = mse_vs_combined(&results, Estimator::Bfi).unwrap();
    let mse_wav = mse_vs_combined(&results, Estimator::Wav).unwrap();
    let (_, labels) = scenario.truth();
    let mut ratios = Vec::new();
    for (j, label) in labels.iter().enumerate() {
        if matches!(label.scope, CoordScope::Center(_)) {
            let ratio = mse_wav[j] / mse_bfi[j];
            assert!(
                ratio >= 3.0,
                "{label}: WAV/BFI MSE ratio {ratio:.2} below 3"
            );
            ratios.push(ratio);
        }
    }
    assert_eq!(ratios.len(), 4);
    pass(
        "05 center-intercept benchmark pattern",
        format!("B=200, WAV/BFI intercept MSE ratios {ratios:?}"),
    );
}

#[test]
fn acceptance_06_prior_precision_insensitivity() {
    let base = named_scenario("table1", 20260).unwrap();
    let results_small = run_many(&base.with_lambda(0.001), 200).unwrap();
    let results_large = run_many(&base.with_lambda(0.01), 200).unwrap();
    let mset_small = mset_vs_truth(&results_small, Estimator::Bfi).unwrap();
    let mset_large = mset_vs_truth(&results_large, Estimator::Bfi).unwrap();
    let mut worst = 0.0f64;
    for j in 0..4 {
        let rel = (mset_small[j] - mset_large[j]).abs() / mset_small[j].max(mset_large[j]);
        assert!(
            rel < 0.30,
            "coordinate {j}: MSET changed {:.1}% between lambda 0.001 and 0.01",
            100.0 * rel
        );
        worst = worst.max(rel);
    }
    pass(
        "06 prior-precision insensitivity",
        format!("B=200, worst relative MSET change {:.1}%", 100.0 * worst),
    );
}

#[test]
fn acceptance_07_credible_interval_coverage() {
    let start = std::time::Instant::now();
    let scenario = named_scenario("table1", 20270)
        .unwrap()
        .with_sample_sizes(&[200, 200, 200, 200])
        .unwrap();
    let coverage = coverage_experiment(&scenario, 500, 0.025).unwrap();
    for (j, &c) in coverage.iter().enumerate() {
        assert!(
            (0.90..=0.98).contains(&c),
            "coordinate {j}: coverage {c:.3} outside [0.90, 0.98]"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "coverage run took {elapsed:?}");
    pass(
        "07 credible-interval coverage",
        format!("B=500, per-coordinate coverage {coverage:?}, {elapsed:.2?}"),
    );
}

#[test]
fn acceptance_08_derivative_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1.0);
    let families = [
        Family::GaussianEstVar,
        Family::gaussian_fixed(0.9).unwrap(),
        Family::BinomialLogit,
    ];
    let mut checked = 0;
    for i in 0..100 {
        let family = families[i % families.len()].clone();
        let p = rng.gen_range(0..3);
        let n = rng.gen_range(1..40);
        let layout = ParamLayout::with_intercept(
            (0..p).map(|k| format!("x{k}")).collect(),
            family.nuisance_count() == 1,
        );
        let x = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.5..1.5));
        let y = DVector::from_fn(n, |_, _| match family {
            Family::BinomialLogit => f64::from(rng.gen_bool(0.5)),
            _ => rng.gen_range(-2.0..2.0),
        });
        let data = Dataset::new("c", y, x).unwrap();
        let design = Design::single(&data, &layout).unwrap();
        let theta = DVector::from_fn(layout.total_dim(), |_, _| rng.gen_range(-1.0..1.0));

        let score = design.score(&family, &theta).unwrap();
        let hess = design.neg_hessian(&family, &theta).unwrap();
        let h = 1e-5;
        for j in 0..theta.len() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (design.log_likelihood(&family, &up).unwrap()
                - design.log_likelihood(&family, &dn).unwrap())
                / (2.0 * h);
            assert!(close(score[j], fd), "score[{j}]: {} vs {}", score[j], fd);
            let ds = (design.score(&family, &up).unwrap()
                - design.score(&family, &dn).unwrap())
                / (2.0 * h);
            for i2 in 0..theta.len() {
                assert!(
                    close(hess[(i2, j)], -ds[i2]),
                    "hessian[({i2},{j})]: {} vs {}",
                    hess[(i2, j)],
                    -ds[i2]
                );
            }
        }
        checked += 1;
    }
    pass(
        "08 derivative correctness",
        format!("{checked} random points, all families, rel tol 1e-5"),
    );
}

#[test]
fn acceptance_09_pooled_standardization_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1009);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(8..200);
        let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
        let values: Vec<f64> = (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let centers = rng.gen_range(2..=5usize);
        // random partition with every center non-empty
        let mut cuts: Vec<usize> = (1..centers).map(|_| rng.gen_range(1..n)).collect();
        cuts.push(0);
        cuts.push(n);
        cuts.sort_unstable();
        cuts.dedup();
        let stats: Vec<SummaryStats> = cuts
            .windows(2)
            .enumerate()
            .map(|(i, w)| SummaryStats::compute(format!("c{i}"), &[&values[w[0]..w[1]]]).unwrap())
            .collect();
        let pooled = pooled_standardization(&stats).unwrap();
        let whole = SummaryStats::compute("all", &[&values]).unwrap();
        let dm = (pooled[0].mean - whole.mean[0]).abs() / scale.max(1.0);
        let ds = (pooled[0].sd - whole.sd[0]).abs() / scale.max(1.0);
        assert!(dm < 1e-10, "mean deviates by {dm:.3e}");
        assert!(ds < 1e-10, "sd deviates by {ds:.3e}");
        worst = worst.max(dm).max(ds);
    }
    pass(
        "09 pooled standardization invariance",
        format!("100 random partitions, worst scaled deviation {worst:.2e}"),
    );
}

#[test]
fn acceptance_10_wire_round_trip_and_file_driven_combine() {
    // 1000 randomized messages survive the round trip exactly
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for _ in 0..1000 {
        let d = rng.gen_range(1..6);
        let layout = ParamLayout::with_intercept(
            (1..d).map(|i| format!("x{i}")).collect(),
            false,
        );
        let m = DMatrix::from_fn(d, d, |_, _| {
            let mag = 10f64.powf(rng.gen_range(-8.0..8.0));
            rng.gen_range(-1.0..1.0) * mag
        });
        let mut a_hat = m.transpose() * &m + DMatrix::identity(d, d) * 1e-6;
        bfi_core::linalg::mirror_upper(&mut a_hat);
        let fit = bfi_core::fit::LocalFit {
            center_id: format!("c{}", rng.gen_range(0..100_000)),
            family: Family::BinomialLogit,
            layout,
            n: rng.gen_range(1..100_000),
            theta_hat: DVector::from_fn(d, |_, _| {
                rng.gen_range(-1.0..1.0) * 10f64.powf(rng.gen_range(-12.0..12.0))
            }),
            a_hat,
            lambda: DMatrix::from_fn(d, d, |i, j| {
                if i == j {
                    rng.gen_range(1e-6..1e3)
                } else {
                    0.0
                }
            }),
            converged: rng.gen_bool(0.95),
            gradient_norm: rng.gen_range(0.0..1e-8),
        };
        let text = serialize_local_fit(&fit).unwrap();
        // extreme dynamic ranges can make an algebraically PSD matrix
        // numerically indefinite; the round trip is what is under test
        let (back, _) = deserialize_local_fit_lenient(&text).unwrap();
        assert_eq!(back.theta_hat, fit.theta_hat);
        assert_eq!(back.a_hat, fit.a_hat);
        assert_eq!(back.lambda, fit.lambda);
        assert_eq!(back.center_id, fit.center_id);
        assert_eq!(back.n, fit.n);
        assert_eq!(back.converged, fit.converged);
        assert!(back.gradient_norm == fit.gradient_norm);
    }

    // a combine driven through files equals the in-memory combine exactly
    let mut rng = ChaCha8Rng::seed_from_u64(2010);
    let instance = random_instance(&mut rng, Family::BinomialLogit, 4, 2, 30..60);
    let prior = instance.combined_prior(0.02, Stratification::None);
    let in_memory = combine_homogeneous(&instance.fits, &prior).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut from_files = Vec::new();
    for fit in &instance.fits {
        let path = dir.path().join(format!("{}.json", fit.center_id));
        std::fs::write(&path, serialize_local_fit(fit).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        from_files.push(deserialize_local_fit(&text).unwrap());
    }
    let via_files = combine_homogeneous(&from_files, &prior).unwrap();
    assert_eq!(via_files.theta, in_memory.theta);
    assert_eq!(via_files.a_matrix, in_memory.a_matrix);
    assert_eq!(via_files.sd, in_memory.sd);
    pass(
        "10 wire round-trip + file-driven combine",
        "1000 messages exact; file-driven combine bitwise equal".to_string(),
    );
}
