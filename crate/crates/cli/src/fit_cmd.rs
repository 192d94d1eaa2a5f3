//! `bfi fit`: local MAP estimation on a CSV file, writing the shareable
//! message for the central server.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bfi_core::fit::map_estimate;
use bfi_core::glm::{Family, ParamLayout};
use bfi_core::message::serialize_local_fit;
use bfi_core::prior::{build_prior, LambdaSpec, Stratification};
use clap::Args;

use crate::csv_input;

#[derive(Args, Debug)]
pub struct FitArgs {
    /// CSV file with a header row; missing cells are an error.
    #[arg(long)]
    pub data: PathBuf,
    /// Outcome column name.
    #[arg(long)]
    pub outcome: String,
    /// Covariate column names, comma-separated; non-numeric columns are
    /// expanded to reference-coded dummies (first observed level is the
    /// reference).
    #[arg(long, value_delimiter = ',', required = true)]
    pub covariates: Vec<String>,
    /// gaussian | gaussian-fixed:S2 | binomial
    #[arg(long)]
    pub family: String,
    /// Prior precision: one value for all coordinates, or one per
    /// coordinate of the expanded layout.
    #[arg(long)]
    pub lambda: String,
    /// Declare that the intercept is meant to be center-specific when the
    /// results are combined. The local fit itself is unchanged;
    /// stratification is applied by `combine`.
    #[arg(long)]
    pub stratified_intercept: bool,
    /// Identifier this center signs its message with.
    #[arg(long)]
    pub center_id: String,
    /// Output message path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_family(text: &str) -> Result<Family> {
    if text == "gaussian" {
        return Ok(Family::GaussianEstVar);
    }
    if text == "binomial" {
        return Ok(Family::BinomialLogit);
    }
    if let Some(s2) = text.strip_prefix("gaussian-fixed:") {
        let sigma2: f64 = s2
            .parse()
            .with_context(|| format!("cannot parse error variance {s2:?}"))?;
        return Ok(Family::gaussian_fixed(sigma2)?);
    }
    bail!("unknown family {text:?} (expected gaussian, gaussian-fixed:<s2> or binomial)")
}

pub fn parse_lambda(text: &str) -> Result<LambdaSpec> {
    let values: Vec<f64> = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("cannot parse lambda entry {v:?}"))
        })
        .collect::<Result<_>>()?;
    Ok(match values.as_slice() {
        [one] => LambdaSpec::Scalar(*one),
        _ => LambdaSpec::PerCoordinate(values),
    })
}

pub fn run(args: &FitArgs) -> Result<ExitCode> {
    let family = parse_family(&args.family)?;
    let covariates: Vec<&str> = args.covariates.iter().map(String::as_str).collect();
    let loaded = csv_input::load(&args.data, &args.outcome, &covariates, &args.center_id)?;
    let layout = ParamLayout::with_intercept(loaded.columns.clone(), family.nuisance_count() == 1);
    if args.stratified_intercept && layout.intercepts.is_empty() {
        bail!("--stratified-intercept needs a model with an intercept");
    }
    let lambda = parse_lambda(&args.lambda)?;
    let prior = build_prior(&layout, &lambda, Stratification::None)?;
    let fit = map_estimate(&family, &loaded.dataset, &prior)?;
    let text = serialize_local_fit(&fit)?;
    std::fs::write(&args.out, text)
        .with_context(|| format!("cannot write {}", args.out.display()))?;

    eprintln!(
        "center {}: n = {}, {} coordinates, gradient norm {:.2e}",
        fit.center_id,
        fit.n,
        fit.dim(),
        fit.gradient_norm
    );
    if args.stratified_intercept {
        eprintln!(
            "note: stratification is applied when combining; pass \
             --mode stratified:intercept to `bfi combine`"
        );
    }
    if !fit.converged {
        eprintln!(
            "warning: fit did NOT converge within the iteration budget; the message \
             records converged = false"
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}
