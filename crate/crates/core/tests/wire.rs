//! Wire-format integration tests: the frozen golden message and a
//! round-trip property over randomized fits.

use bfi_core::fit::LocalFit;
use bfi_core::glm::{Family, ParamLayout};
use bfi_core::message::{
    deserialize_local_fit, deserialize_local_fit_lenient, serialize_local_fit,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const GOLDEN: &str = include_str!("data/golden_fit.json");

#[test]
fn golden_message_decodes_to_expected_fit() {
    let fit = deserialize_local_fit(GOLDEN).unwrap();
    assert_eq!(fit.center_id, "golden-center");
    assert_eq!(fit.family, Family::BinomialLogit);
    assert_eq!(
        fit.layout,
        ParamLayout::with_intercept(vec!["age".into(), "exposed".into()], false)
    );
    assert_eq!(fit.n, 8);
    assert!(fit.converged);
    assert_eq!(
        fit.theta_hat,
        DVector::from_row_slice(&[
            1.3510988016991443,
            6.158615886938878,
            -0.4931702963559448
        ])
    );
    assert_eq!(
        fit.a_hat,
        DMatrix::from_row_slice(
            3,
            3,
            &[
                0.3823741508778238,
                -0.051338352884940264,
                0.3222768598338103,
                -0.051338352884940264,
                0.06661026537321653,
                -0.05986273054376178,
                0.3222768598338103,
                -0.05986273054376178,
                0.34227685983381034,
            ]
        )
    );
    assert_eq!(fit.lambda, DMatrix::identity(3, 3) * 0.02);
    assert_eq!(fit.gradient_norm, 9.465227768234996e-10);
}

#[test]
fn golden_message_is_serializer_stable() {
    // re-serializing the decoded fit reproduces the checked-in bytes
    let fit = deserialize_local_fit(GOLDEN).unwrap();
    assert_eq!(serialize_local_fit(&fit).unwrap(), GOLDEN);
}

fn finite_f64() -> impl Strategy<Value = f64> {
    any::<f64>().prop_filter("finite", |v| v.is_finite())
}

prop_compose! {
    fn arb_fit()(d in 1usize..5)(
        d in Just(d),
        theta in prop::collection::vec(finite_f64(), d),
        upper in prop::collection::vec(finite_f64(), d * d),
        diag in prop::collection::vec(0.001f64..10.0, d),
        n in 1usize..10_000,
        converged in any::<bool>(),
        grad in 0.0f64..1e-8,
        id in "[a-z]{1,12}",
    ) -> LocalFit {
        let layout = ParamLayout::with_intercept(
            (1..d).map(|i| format!("x{i}")).collect(),
            false,
        );
        let mut a_hat = DMatrix::from_fn(d, d, |i, j| upper[i * d + j]);
        // symmetrize exactly, as any honest producer would
        for i in 0..d {
            for j in (i + 1)..d {
                a_hat[(j, i)] = a_hat[(i, j)];
            }
        }
        let lambda = DMatrix::from_fn(d, d, |i, j| if i == j { diag[i] } else { 0.0 });
        LocalFit {
            center_id: id,
            family: Family::BinomialLogit,
            layout,
            n,
            theta_hat: DVector::from_vec(theta),
            a_hat,
            lambda,
            converged,
            gradient_norm: grad,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn round_trip_preserves_every_field(fit in arb_fit()) {
        let text = serialize_local_fit(&fit).unwrap();
        // arbitrary symmetric curvature may be indefinite; decode leniently
        let (back, _) = deserialize_local_fit_lenient(&text).unwrap();
        prop_assert_eq!(&back.center_id, &fit.center_id);
        prop_assert_eq!(&back.layout, &fit.layout);
        prop_assert_eq!(back.n, fit.n);
        prop_assert_eq!(back.converged, fit.converged);
        prop_assert_eq!(&back.theta_hat, &fit.theta_hat);
        prop_assert_eq!(&back.a_hat, &fit.a_hat);
        prop_assert_eq!(&back.lambda, &fit.lambda);
        prop_assert!(back.gradient_norm == fit.gradient_norm);
        // canonical form: serializing again is byte-identical
        prop_assert_eq!(serialize_local_fit(&back).unwrap(), text);
    }
}
