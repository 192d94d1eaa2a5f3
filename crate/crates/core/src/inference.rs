//! Interval statements, heterogeneity diagnostics, one-shot baseline
//! estimators and pooled summary statistics.

use nalgebra::DVector;

use crate::combine::{combine_homogeneous, BfiResult, CoordLabel, CoordScope, StructureMode};
use crate::error::{Error, Result};
use crate::fit::LocalFit;
use crate::linalg;
use crate::prior::PriorSpec;

/// Two-sided credible interval for one coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    /// Credibility level `1 - 2 alpha`.
    pub level: f64,
    pub param_index: usize,
}

impl Interval {
    pub fn contains(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

// ---------------------------------------------------------------------------
// standard normal CDF and upper quantile
// ---------------------------------------------------------------------------

// Rational approximations for erfc in three regimes (Cody-style
// coefficients, double precision, kept verbatim).
#[allow(clippy::excessive_precision)]
const ERF_A: [f64; 5] = [
    3.16112374387056560e0,
    1.13864154151050156e2,
    3.77485237685302021e2,
    3.20937758913846947e3,
    1.85777706184603153e-1,
];
#[allow(clippy::excessive_precision)]
const ERF_B: [f64; 4] = [
    2.36012909523441209e1,
    2.44024637934444173e2,
    1.28261652607737228e3,
    2.84423683343917062e3,
];
#[allow(clippy::excessive_precision)]
const ERF_C: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e0,
    6.61191906371416295e1,
    2.98635138197400131e2,
    8.81952221241769090e2,
    1.71204761263407058e3,
    2.05107837782607147e3,
    1.23033935479799725e3,
    2.15311535474403846e-8,
];
#[allow(clippy::excessive_precision)]
const ERF_D: [f64; 8] = [
    1.57449261107098347e1,
    1.17693950891312499e2,
    5.37181101862009858e2,
    1.62138957456669019e3,
    3.29079923573345963e3,
    4.36261909014324716e3,
    3.43936767414372164e3,
    1.23033935480374942e3,
];
#[allow(clippy::excessive_precision)]
const ERF_P: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
#[allow(clippy::excessive_precision)]
const ERF_Q: [f64; 5] = [
    2.56852019228982242e0,
    1.87295284992346047e0,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];
#[allow(clippy::excessive_precision)]
const INV_SQRT_PI: f64 = 5.6418958354775628695e-1;

/// Complementary error function, accurate near machine precision.
fn erfc(x: f64) -> f64 {
    let y = x.abs();
    let result = if y <= 0.46875 {
        let z = if y > 1e-300 { y * y } else { 0.0 };
        let mut num = ERF_A[4] * z;
        let mut den = z;
        for i in 0..3 {
            num = (num + ERF_A[i]) * z;
            den = (den + ERF_B[i]) * z;
        }
        return 1.0 - x * (num + ERF_A[3]) / (den + ERF_B[3]);
    } else if y <= 4.0 {
        let mut num = ERF_C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + ERF_C[i]) * y;
            den = (den + ERF_D[i]) * y;
        }
        let r = (num + ERF_C[7]) / (den + ERF_D[7]);
        scale_by_exp(y, r)
    } else if y < 26.5 {
        let ysq = 1.0 / (y * y);
        let mut num = ERF_P[5] * ysq;
        let mut den = ysq;
        for i in 0..4 {
            num = (num + ERF_P[i]) * ysq;
            den = (den + ERF_Q[i]) * ysq;
        }
        let mut r = ysq * (num + ERF_P[4]) / (den + ERF_Q[4]);
        r = (INV_SQRT_PI - r) / y;
        scale_by_exp(y, r)
    } else {
        0.0
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

/// `exp(-y^2) * r` with the argument split to limit cancellation.
fn scale_by_exp(y: f64, r: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp() * r
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse standard normal CDF: a rational initial guess refined by one
/// Halley step on the CDF; absolute error well below 1e-9 over the usual
/// range.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p.is_finite() && p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile probability must lie strictly inside (0, 1), got {p}"
        )));
    }
    #[allow(clippy::excessive_precision)]
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239e0,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838e0,
        -2.549732539343734e0,
        4.374664141464968e0,
        2.938163982698783e0,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996e0,
        3.754408661907416e0,
    ];
    const P_LOW: f64 = 0.02425;

    let x0 = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    };

    // one Halley step on cdf(x) - p = 0
    let e = normal_cdf(x0) - p;
    let u = e / normal_pdf(x0);
    let refined = x0 - u / (1.0 + x0 * u / 2.0);
    // at the representable extremes the density underflows; keep the
    // rational guess rather than propagating a non-finite correction
    Ok(if refined.is_finite() { refined } else { x0 })
}

/// Upper `alpha`-quantile of the standard normal distribution.
///
/// `alpha = 0.5` yields exactly 0, so intervals degenerate to a point.
pub fn upper_quantile(alpha: f64) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 0.5], got {alpha}"
        )));
    }
    if alpha == 0.5 {
        return Ok(0.0);
    }
    // lower-tail symmetry avoids the cancellation in 1 - alpha for tiny
    // tail masses
    Ok(-normal_quantile(alpha)?)
}

// ---------------------------------------------------------------------------
// credible intervals and heterogeneity checks
// ---------------------------------------------------------------------------

/// `(1 - 2 alpha)` credible interval for coordinate `k` of an aggregated
/// result: the estimate plus/minus the upper alpha-quantile times the
/// posterior standard deviation.
pub fn credible_interval(result: &BfiResult, k: usize, alpha: f64) -> Result<Interval> {
    if k >= result.dim() {
        return Err(Error::InvalidArgument(format!(
            "coordinate {k} out of range for a result of dimension {}",
            result.dim()
        )));
    }
    let xi = upper_quantile(alpha)?;
    let half = xi * result.sd[k];
    Ok(Interval {
        lo: result.theta[k] - half,
        hi: result.theta[k] + half,
        level: 1.0 - 2.0 * alpha,
        param_index: k,
    })
}

/// Posterior variance of one coordinate of a local fit: the matching
/// diagonal entry of the inverse curvature.
fn coordinate_variance(fit: &LocalFit, coord: usize) -> Result<f64> {
    if coord >= fit.dim() {
        return Err(Error::InvalidArgument(format!(
            "coordinate {coord} out of range for center {}",
            fit.center_id
        )));
    }
    let mut e = DVector::zeros(fit.dim());
    e[coord] = 1.0;
    let col = linalg::solve_spd(&fit.a_hat, &e, "local curvature")?;
    Ok(col[coord])
}

/// Credible interval for the between-center difference of one coordinate,
/// using the independence of the two local posteriors.
pub fn heterogeneity_pairwise(
    fit_k: &LocalFit,
    fit_l: &LocalFit,
    coord: usize,
    alpha: f64,
) -> Result<Interval> {
    if fit_k.layout != fit_l.layout {
        return Err(Error::Incompatible(vec![format!(
            "centers {} and {} have different layouts",
            fit_k.center_id, fit_l.center_id
        )]));
    }
    if !fit_k.converged || !fit_l.converged {
        return Err(Error::InvalidArgument(
            "heterogeneity checks need converged fits".into(),
        ));
    }
    let vk = coordinate_variance(fit_k, coord)?;
    let vl = coordinate_variance(fit_l, coord)?;
    let xi = upper_quantile(alpha)?;
    let center = fit_k.theta_hat[coord] - fit_l.theta_hat[coord];
    let half = xi * (vk + vl).sqrt();
    Ok(Interval {
        lo: center - half,
        hi: center + half,
        level: 1.0 - 2.0 * alpha,
        param_index: coord,
    })
}

/// Credible interval for the difference between the aggregate of all
/// centers except `center_id` and that center itself, for one coordinate.
///
/// `lambda_minus` is the combined prior used when aggregating the remaining
/// centers; which prior to use there is the caller's modeling choice, so it
/// is an explicit argument.
pub fn heterogeneity_leave_one_out(
    fits: &[LocalFit],
    center_id: &str,
    lambda_minus: &PriorSpec,
    coord: usize,
    alpha: f64,
) -> Result<Interval> {
    if fits.len() < 2 {
        return Err(Error::InvalidArgument(
            "leave-one-out check needs at least two centers".into(),
        ));
    }
    let held_out = fits
        .iter()
        .find(|f| f.center_id == center_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no fit with center id {center_id}")))?;
    let rest: Vec<LocalFit> = fits
        .iter()
        .filter(|f| f.center_id != center_id)
        .cloned()
        .collect();
    let bfi = combine_homogeneous(&rest, lambda_minus)?;
    if coord >= bfi.dim() {
        return Err(Error::InvalidArgument(format!(
            "coordinate {coord} out of range"
        )));
    }
    let v_rest = bfi.sd[coord] * bfi.sd[coord];
    let v_held = coordinate_variance(held_out, coord)?;
    let xi = upper_quantile(alpha)?;
    let center = bfi.theta[coord] - held_out.theta_hat[coord];
    let half = xi * (v_rest + v_held).sqrt();
    Ok(Interval {
        lo: center - half,
        hi: center + half,
        level: 1.0 - 2.0 * alpha,
        param_index: coord,
    })
}

// ---------------------------------------------------------------------------
// one-shot baseline estimators
// ---------------------------------------------------------------------------

/// Sample-size-weighted average of local estimates, in the combined layout
/// of the given structure.
#[derive(Clone, Debug)]
pub struct WavEstimate {
    pub theta: DVector<f64>,
    pub labels: Vec<CoordLabel>,
}

/// Weighted-average baseline.
///
/// Shared coordinates average all centers with weights `n_l / n`. A
/// cluster-specific intercept averages only the centers of its cluster; a
/// center-specific coordinate falls back to that center's own estimate.
pub fn wav_estimate(fits: &[LocalFit], mode: &StructureMode) -> Result<WavEstimate> {
    let mut sorted: Vec<&LocalFit> = fits.iter().collect();
    sorted.sort_by(|a, b| a.center_id.cmp(&b.center_id));
    let first = *sorted.first().ok_or_else(|| {
        Error::InvalidArgument("cannot average an empty list of local fits".into())
    })?;
    let d = first.layout.total_dim();
    let names = first.layout.coord_names();
    let n_total: usize = sorted.iter().map(|f| f.n).sum();

    let weighted_shared = |coord: usize| -> f64 {
        sorted
            .iter()
            .map(|f| f.n as f64 / n_total as f64 * f.theta_hat[coord])
            .sum()
    };

    match mode {
        StructureMode::Homogeneous => {
            let theta = DVector::from_fn(d, |i, _| weighted_shared(i));
            let labels = names
                .into_iter()
                .map(|name| CoordLabel {
                    name,
                    scope: CoordScope::Shared,
                })
                .collect();
            Ok(WavEstimate { theta, labels })
        }
        StructureMode::Stratified { param_indices } => {
            let mut strat = param_indices.clone();
            strat.sort_unstable();
            strat.dedup();
            let shared: Vec<usize> = (0..d).filter(|i| !strat.contains(i)).collect();
            let mut theta = Vec::new();
            let mut labels = Vec::new();
            for &i in &shared {
                theta.push(weighted_shared(i));
                labels.push(CoordLabel {
                    name: names[i].clone(),
                    scope: CoordScope::Shared,
                });
            }
            for fit in &sorted {
                for &i in &strat {
                    // no cross-center average exists for a center-specific
                    // parameter; the baseline is the local estimate itself
                    theta.push(fit.theta_hat[i]);
                    labels.push(CoordLabel {
                        name: names[i].clone(),
                        scope: CoordScope::Center(fit.center_id.clone()),
                    });
                }
            }
            Ok(WavEstimate {
                theta: DVector::from_vec(theta),
                labels,
            })
        }
        StructureMode::Clustered {
            cluster_of_center,
            clusters,
        } => {
            if first.layout.intercepts.len() != 1 {
                return Err(Error::InvalidArgument(
                    "clustered averaging needs local fits with an intercept".into(),
                ));
            }
            let mut theta = Vec::new();
            let mut labels = Vec::new();
            for (i, name) in names.iter().enumerate().take(d).skip(1) {
                theta.push(weighted_shared(i));
                labels.push(CoordLabel {
                    name: name.clone(),
                    scope: CoordScope::Shared,
                });
            }
            for k in 1..=*clusters {
                let members: Vec<&&LocalFit> = sorted
                    .iter()
                    .filter(|f| cluster_of_center.get(&f.center_id) == Some(&k))
                    .collect();
                if members.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "cluster {k} has no contributing centers"
                    )));
                }
                let nk: usize = members.iter().map(|f| f.n).sum();
                let avg = members
                    .iter()
                    .map(|f| f.n as f64 / nk as f64 * f.theta_hat[0])
                    .sum();
                theta.push(avg);
                labels.push(CoordLabel {
                    name: names[0].clone(),
                    scope: CoordScope::Cluster(k),
                });
            }
            Ok(WavEstimate {
                theta: DVector::from_vec(theta),
                labels,
            })
        }
    }
}

/// The local estimate of the chosen largest center.
#[derive(Clone, Debug)]
pub struct SingleCenterEstimate {
    pub center_id: String,
    pub theta: DVector<f64>,
}

/// Single-center baseline: the MAP estimate of the center with the largest
/// sample size, ties broken toward the lowest center id unless `pin`
/// selects a center explicitly. Not defined when any coordinate is center-
/// or cluster-specific.
pub fn single_center_estimate(
    fits: &[LocalFit],
    mode: &StructureMode,
    pin: Option<&str>,
) -> Result<SingleCenterEstimate> {
    if !matches!(mode, StructureMode::Homogeneous) {
        return Err(Error::InvalidArgument(
            "the single-center estimator is not defined for center- or cluster-specific parameters"
                .into(),
        ));
    }
    if fits.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot select from an empty list of local fits".into(),
        ));
    }
    let chosen = match pin {
        Some(id) => fits
            .iter()
            .find(|f| f.center_id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("no fit with center id {id}")))?,
        None => {
            let mut best = &fits[0];
            for fit in &fits[1..] {
                if fit.n > best.n || (fit.n == best.n && fit.center_id < best.center_id) {
                    best = fit;
                }
            }
            best
        }
    };
    Ok(SingleCenterEstimate {
        center_id: chosen.center_id.clone(),
        theta: chosen.theta_hat.clone(),
    })
}

// ---------------------------------------------------------------------------
// pooled summary statistics
// ---------------------------------------------------------------------------

/// Per-center sample size, means and sample standard deviations (n-1
/// divisor; zero for a single observation).
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryStats {
    pub center_id: String,
    pub n: usize,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl SummaryStats {
    pub fn compute(center_id: impl Into<String>, columns: &[&[f64]]) -> Result<SummaryStats> {
        let n = columns.first().map_or(0, |c| c.len());
        if n == 0 {
            return Err(Error::InvalidArgument(
                "summary statistics need at least one observation".into(),
            ));
        }
        let mut mean = Vec::with_capacity(columns.len());
        let mut sd = Vec::with_capacity(columns.len());
        for col in columns {
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "summary columns",
                    expected: n,
                    got: col.len(),
                });
            }
            let m = col.iter().sum::<f64>() / n as f64;
            let s = if n > 1 {
                (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
            } else {
                0.0
            };
            mean.push(m);
            sd.push(s);
        }
        Ok(SummaryStats {
            center_id: center_id.into(),
            n,
            mean,
            sd,
        })
    }
}

/// Pooled mean and sample standard deviation of one variable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PooledMoments {
    pub mean: f64,
    pub sd: f64,
}

/// Reconstructs full-sample means and standard deviations from per-center
/// summaries alone, via the exact decomposition
/// `(n-1) s^2 = sum_l (n_l - 1) s_l^2 + sum_l n_l (m_l - m)^2`.
pub fn pooled_standardization(stats: &[SummaryStats]) -> Result<Vec<PooledMoments>> {
    let first = stats.first().ok_or_else(|| {
        Error::InvalidArgument("pooled standardization needs at least one center".into())
    })?;
    let vars = first.mean.len();
    let mut n_total = 0usize;
    for s in stats {
        if s.mean.len() != vars || s.sd.len() != vars {
            return Err(Error::DimensionMismatch {
                what: "summary variables",
                expected: vars,
                got: s.mean.len().max(s.sd.len()),
            });
        }
        if s.n == 0 {
            return Err(Error::InvalidArgument(format!(
                "center {} reports zero observations",
                s.center_id
            )));
        }
        if s.sd.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "center {} reports a negative standard deviation",
                s.center_id
            )));
        }
        n_total += s.n;
    }
    if n_total < 2 {
        return Err(Error::InvalidArgument(
            "pooled standardization needs a pooled sample size of at least 2".into(),
        ));
    }
    let mut out = Vec::with_capacity(vars);
    for v in 0..vars {
        let mean =
            stats.iter().map(|s| s.n as f64 * s.mean[v]).sum::<f64>() / n_total as f64;
        let within: f64 = stats
            .iter()
            .map(|s| (s.n as f64 - 1.0) * s.sd[v] * s.sd[v])
            .sum();
        let between: f64 = stats
            .iter()
            .map(|s| s.n as f64 * (s.mean[v] - mean) * (s.mean[v] - mean))
            .sum();
        let sd = ((within + between) / (n_total as f64 - 1.0)).sqrt();
        out.push(PooledMoments { mean, sd });
    }
    Ok(out)
}
