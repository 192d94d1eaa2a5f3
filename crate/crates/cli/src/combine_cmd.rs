//! `bfi combine`: one-shot aggregation of fit messages into the combined
//! estimate, with intervals, baselines and heterogeneity diagnostics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bfi_core::combine::{
    combine_clustered, combine_homogeneous, combine_stratified, BfiResult, CoordScope,
    StructureMode,
};
use bfi_core::fit::{check_curvature, LocalFit};
use bfi_core::glm::ParamLayout;
use bfi_core::inference::{
    credible_interval, heterogeneity_pairwise, single_center_estimate, upper_quantile,
    wav_estimate,
};
use bfi_core::message::{
    deserialize_local_fit, deserialize_local_fit_lenient, validate_compatibility, LambdaMatrix,
};
use bfi_core::prior::{build_prior, LambdaSpec, PriorSpec, Stratification};
use clap::Args;
use nalgebra::DMatrix;
use serde::Serialize;

#[derive(Args, Debug)]
pub struct CombineArgs {
    /// Fit message files, comma-separated (or repeated).
    #[arg(long, value_delimiter = ',', required = true)]
    pub fits: Vec<PathBuf>,
    /// Prior precision for the fictive combined data: a number (diagonal
    /// of the combined layout) or a path to a JSON file holding
    /// {"diag": [...]} or {"dense": [...]} in the combined layout.
    #[arg(long)]
    pub lambda: String,
    /// homogeneous | stratified:COORDS | clustered:LABELFILE
    ///
    /// COORDS is a comma-separated list of coordinate names or indices of
    /// the local layout; LABELFILE is a CSV mapping center_id to a 1-based
    /// cluster label.
    #[arg(long)]
    pub mode: String,
    /// Upper tail mass on each side of the credible intervals.
    #[arg(long, default_value_t = 0.025)]
    pub alpha: f64,
    /// Pin the single-center baseline to this center id instead of the
    /// largest-n/lowest-id rule.
    #[arg(long)]
    pub single_center: Option<String>,
    /// Accept messages whose curvature or prior fails the positive
    /// definiteness check (demoted to warnings).
    #[arg(long)]
    pub allow_non_pd: bool,
    /// Output report path (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

enum Mode {
    Homogeneous,
    Stratified(Vec<usize>),
    Clustered(BTreeMap<String, usize>, usize),
}

fn parse_coords(spec: &str, layout: &ParamLayout) -> Result<Vec<usize>> {
    let names = layout.coord_names();
    let mut coords = Vec::new();
    for token in spec.split(',') {
        let token = token.trim();
        let idx = match token.parse::<usize>() {
            Ok(i) => i,
            Err(_) => names
                .iter()
                .position(|n| n == token)
                .with_context(|| format!("no coordinate named {token:?}; layout has {names:?}"))?,
        };
        if idx >= names.len() {
            bail!("coordinate index {idx} out of range for layout {names:?}");
        }
        if coords.contains(&idx) {
            bail!("coordinate {token:?} listed twice");
        }
        coords.push(idx);
    }
    if coords.is_empty() {
        bail!("stratified mode needs at least one coordinate");
    }
    Ok(coords)
}

fn parse_cluster_file(path: &Path) -> Result<BTreeMap<String, usize>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 2 {
            bail!(
                "{}: row {} must have exactly two fields (center_id,cluster)",
                path.display(),
                i + 1
            );
        }
        let id = record.get(0).unwrap().to_string();
        let label_text = record.get(1).unwrap();
        if i == 0 && label_text.parse::<usize>().is_err() {
            continue; // header row
        }
        let label: usize = label_text
            .parse()
            .with_context(|| format!("row {}: cluster label {label_text:?}", i + 1))?;
        if map.insert(id.clone(), label).is_some() {
            bail!("duplicate center id {id:?} in {}", path.display());
        }
    }
    if map.is_empty() {
        bail!("{} assigns no clusters", path.display());
    }
    Ok(map)
}

fn parse_mode(text: &str, layout: &ParamLayout) -> Result<Mode> {
    if text == "homogeneous" {
        return Ok(Mode::Homogeneous);
    }
    if let Some(spec) = text.strip_prefix("stratified:") {
        return Ok(Mode::Stratified(parse_coords(spec, layout)?));
    }
    if let Some(file) = text.strip_prefix("clustered:") {
        let map = parse_cluster_file(Path::new(file))?;
        let k = map.values().copied().max().unwrap_or(0);
        return Ok(Mode::Clustered(map, k));
    }
    bail!("unknown mode {text:?} (expected homogeneous, stratified:<coords> or clustered:<labelfile>)")
}

fn build_combined_prior(
    lambda_arg: &str,
    layout: &ParamLayout,
    strat: Stratification,
) -> Result<PriorSpec> {
    if let Ok(value) = lambda_arg.parse::<f64>() {
        return Ok(build_prior(layout, &LambdaSpec::Scalar(value), strat)?);
    }
    let path = Path::new(lambda_arg);
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("--lambda {lambda_arg:?} is neither a number nor a readable file"))?;
    let parsed: LambdaMatrix = serde_json::from_str(&text)
        .with_context(|| format!("{}: expected {{\"diag\": [...]}} or {{\"dense\": [...]}}", path.display()))?;
    let dim = PriorSpec::expanded_dim(layout, &strat);
    let matrix = match parsed {
        LambdaMatrix::Diag(diag) => {
            if diag.len() != dim {
                bail!(
                    "{}: diagonal has {} entries, combined layout needs {dim}",
                    path.display(),
                    diag.len()
                );
            }
            DMatrix::from_fn(dim, dim, |i, j| if i == j { diag[i] } else { 0.0 })
        }
        LambdaMatrix::Dense(entries) => {
            if entries.len() != dim * dim {
                bail!(
                    "{}: dense matrix has {} entries, combined layout needs {}",
                    path.display(),
                    entries.len(),
                    dim * dim
                );
            }
            DMatrix::from_row_slice(dim, dim, &entries)
        }
    };
    Ok(PriorSpec::new(matrix, layout.clone(), strat)?)
}

#[derive(Serialize)]
struct CoordinateReport {
    name: String,
    scope: String,
    estimate: f64,
    sd: f64,
    interval_lo: f64,
    interval_hi: f64,
}

#[derive(Serialize)]
struct WavReport {
    name: String,
    scope: String,
    estimate: f64,
}

#[derive(Serialize)]
struct SingleReport {
    center_id: String,
    estimate: Vec<f64>,
}

#[derive(Serialize)]
struct PairwiseReport {
    coordinate: String,
    center_a: String,
    center_b: String,
    lo: f64,
    hi: f64,
}

#[derive(Serialize)]
struct Diagnostics {
    curvature_pd: bool,
    condition_estimate: Option<f64>,
    /// Between-center intercept difference intervals (homogeneous runs).
    pairwise_intercept_intervals: Vec<PairwiseReport>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct CombineReport {
    schema_version: u32,
    mode: String,
    alpha: f64,
    level: f64,
    n_total: usize,
    centers: Vec<CenterEntry>,
    coordinates: Vec<CoordinateReport>,
    wav: Vec<WavReport>,
    single_center: Option<SingleReport>,
    diagnostics: Diagnostics,
}

#[derive(Serialize)]
struct CenterEntry {
    id: String,
    n: usize,
}

fn scope_string(scope: &CoordScope) -> String {
    match scope {
        CoordScope::Shared => "shared".to_string(),
        CoordScope::Center(id) => format!("center:{id}"),
        CoordScope::Cluster(k) => format!("cluster:{k}"),
    }
}

pub fn run(args: &CombineArgs) -> Result<ExitCode> {
    let mut warnings = Vec::new();
    let mut fits: Vec<LocalFit> = Vec::new();
    for path in &args.fits {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let fit = if args.allow_non_pd {
            let (fit, notes) = deserialize_local_fit_lenient(&text)
                .with_context(|| format!("{}", path.display()))?;
            warnings.extend(notes);
            fit
        } else {
            deserialize_local_fit(&text).with_context(|| format!("{}", path.display()))?
        };
        if !fit.converged {
            warnings.push(format!(
                "center {}: local fit is flagged as not converged (gradient norm {:.2e})",
                fit.center_id, fit.gradient_norm
            ));
        }
        fits.push(fit);
    }

    let compat = validate_compatibility(&fits);
    if !compat.is_ok() {
        bail!(
            "fit messages are not combinable:\n  {}",
            compat.violations.join("\n  ")
        );
    }
    let layout = fits[0].layout.clone();
    let mode = parse_mode(&args.mode, &layout)?;

    let (result, mode_name): (BfiResult, String) = match &mode {
        Mode::Homogeneous => {
            let prior = build_combined_prior(&args.lambda, &layout, Stratification::None)?;
            (combine_homogeneous(&fits, &prior)?, "homogeneous".into())
        }
        Mode::Stratified(coords) => {
            let prior = build_combined_prior(
                &args.lambda,
                &layout,
                Stratification::CenterSpecific {
                    param_indices: coords.clone(),
                    centers: fits.len(),
                },
            )?;
            (
                combine_stratified(&fits, &prior, coords)?,
                format!("stratified on {coords:?}"),
            )
        }
        Mode::Clustered(map, k) => {
            let prior = build_combined_prior(
                &args.lambda,
                &layout,
                Stratification::Clustered {
                    param_indices: vec![0],
                    clusters: *k,
                },
            )?;
            (
                combine_clustered(&fits, &prior, map, *k)?,
                format!("clustered into {k}"),
            )
        }
    };

    let structure_mode = &result.structure.mode;
    let wav = wav_estimate(&fits, structure_mode)?;
    let single = match single_center_estimate(&fits, structure_mode, args.single_center.as_deref())
    {
        Ok(s) => Some(SingleReport {
            center_id: s.center_id,
            estimate: s.theta.iter().copied().collect(),
        }),
        Err(_) => {
            if args.single_center.is_some() {
                warnings.push(
                    "--single-center ignored: the estimator is not defined for center- or \
                     cluster-specific parameters"
                        .to_string(),
                );
            }
            None
        }
    };

    let mut coordinates = Vec::with_capacity(result.dim());
    for (k, label) in result.labels.iter().enumerate() {
        let ci = credible_interval(&result, k, args.alpha)?;
        coordinates.push(CoordinateReport {
            name: label.name.clone(),
            scope: scope_string(&label.scope),
            estimate: result.theta[k],
            sd: result.sd[k],
            interval_lo: ci.lo,
            interval_hi: ci.hi,
        });
    }

    // between-center heterogeneity check on the intercept, when feasible
    let mut pairwise = Vec::new();
    if matches!(structure_mode, StructureMode::Homogeneous)
        && layout.intercepts.len() == 1
        && fits.len() >= 2
        && fits.len() <= 12
    {
        let mut sorted: Vec<&LocalFit> = fits.iter().collect();
        sorted.sort_by(|a, b| a.center_id.cmp(&b.center_id));
        for i in 0..sorted.len() {
            for j in (i + 1)..sorted.len() {
                if let Ok(ci) = heterogeneity_pairwise(sorted[i], sorted[j], 0, args.alpha) {
                    pairwise.push(PairwiseReport {
                        coordinate: "intercept".into(),
                        center_a: sorted[i].center_id.clone(),
                        center_b: sorted[j].center_id.clone(),
                        lo: ci.lo,
                        hi: ci.hi,
                    });
                }
            }
        }
    }

    let curvature = check_curvature(&result.a_matrix)?;
    let report = CombineReport {
        schema_version: 1,
        mode: mode_name,
        alpha: args.alpha,
        level: 1.0 - 2.0 * args.alpha,
        n_total: result.n_total(),
        centers: result
            .centers
            .iter()
            .map(|(id, n)| CenterEntry {
                id: id.clone(),
                n: *n,
            })
            .collect(),
        coordinates,
        wav: wav
            .labels
            .iter()
            .zip(wav.theta.iter())
            .map(|(label, est)| WavReport {
                name: label.name.clone(),
                scope: scope_string(&label.scope),
                estimate: *est,
            })
            .collect(),
        single_center: single,
        diagnostics: Diagnostics {
            curvature_pd: curvature.is_pd,
            condition_estimate: curvature.condition_estimate,
            pairwise_intercept_intervals: pairwise,
            warnings: warnings.clone(),
        },
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&args.out, text)
        .with_context(|| format!("cannot write {}", args.out.display()))?;

    let xi = upper_quantile(args.alpha)?;
    eprintln!(
        "combined {} centers (n = {}), {} coordinates, xi_alpha = {:.4}",
        result.centers.len(),
        result.n_total(),
        result.dim(),
        xi
    );
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{:<28} {:>12} {:>12} {:>12} {:>12}",
        "coordinate", "estimate", "sd", "lo", "hi"
    );
    for (k, label) in result.labels.iter().enumerate() {
        let ci = credible_interval(&result, k, args.alpha)?;
        println!(
            "{:<28} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            label.to_string(),
            result.theta[k],
            result.sd[k],
            ci.lo,
            ci.hi
        );
    }
    Ok(ExitCode::SUCCESS)
}
