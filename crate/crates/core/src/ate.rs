//! Average treatment effects: the smoothed estimator (average of GATE fits at
//! every observation) and plain score averages.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gate::{floor_violations, Moderators};
use crate::kernel::{self, Bandwidth, KernelSpec};
use crate::score::{ScoreVariant, ScoreVector};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AteMethod {
    SmoothedAipw,
    AveragedAipw,
    AveragedIpw,
    AveragedOutcome,
}

impl AteMethod {
    pub fn name(self) -> &'static str {
        match self {
            AteMethod::SmoothedAipw => "smoothed_aipw",
            AteMethod::AveragedAipw => "averaged_aipw",
            AteMethod::AveragedIpw => "averaged_ipw",
            AteMethod::AveragedOutcome => "averaged_outcome",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteResult {
    pub method: AteMethod,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    pub n: usize,
    /// Moderators used for smoothing (smoothed estimator only).
    pub smoothing_moderators: Option<Vec<String>>,
    /// Bandwidth in standardized moderator units (smoothed estimator only).
    pub bandwidth: Option<f64>,
    pub kernel_order: Option<u32>,
}

fn influence_se(psi: &[f64]) -> f64 {
    stats::sd(psi) / (psi.len() as f64).sqrt()
}

fn result(method: AteMethod, estimate: f64, se: f64, level: f64, n: usize) -> Result<AteResult> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let c = stats::normal_critical(level);
    Ok(AteResult {
        method,
        estimate,
        std_error: se,
        ci_lower: estimate - c * se,
        ci_upper: estimate + c * se,
        level,
        n,
        smoothing_moderators: None,
        bandwidth: None,
        kernel_order: None,
    })
}

/// `mean(ψ)` with standard error `SD(ψ)/√N`.
pub fn averaged_ate(psi: &ScoreVector, level: f64) -> Result<AteResult> {
    if psi.n() < 2 {
        return Err(Error::Validation("the ATE needs at least 2 observations".into()));
    }
    let method = match psi.variant {
        ScoreVariant::Aipw => AteMethod::AveragedAipw,
        ScoreVariant::Ipw => AteMethod::AveragedIpw,
        ScoreVariant::Outcome => AteMethod::AveragedOutcome,
    };
    result(method, stats::mean(&psi.psi), influence_se(&psi.psi), level, psi.n())
}

/// Mean of the GATE fits `τ̂(zⱼ)` over all observations, each fit using the
/// full sample including `j`. The standard error is the score's influence
/// function `SD(ψ)/√N`, the same as for the averaged AIPW estimator.
pub fn smoothed_ate(psi: &ScoreVector, z: &Moderators, bandwidth: &Bandwidth, spec: KernelSpec, level: f64) -> Result<AteResult> {
    spec.validate()?;
    let n = psi.n();
    if n < 2 {
        return Err(Error::Validation("the ATE needs at least 2 observations".into()));
    }
    if z.raw.nrows() != n {
        return Err(Error::Validation("score vector and moderators differ in length".into()));
    }
    let zs = &z.standardized;
    let h = bandwidth.h;
    if h.is_infinite() {
        // Every τ̂(zⱼ) is the sample mean.
        let mut r = result(AteMethod::SmoothedAipw, stats::mean(&psi.psi), influence_se(&psi.psi), level, n)?;
        r.smoothing_moderators = Some(z.names.clone());
        r.bandwidth = Some(h);
        r.kernel_order = Some(spec.order);
        return Ok(r);
    }
    let fits: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let q: Vec<f64> = (0..zs.ncols()).map(|k| zs[(j, k)]).collect();
            kernel::nw_regress(&psi.psi, zs, &q, h, spec).ok().map(|f| f.estimate)
        })
        .collect();
    if fits.iter().any(Option::is_none) {
        return Err(Error::DensityFloor { rows: floor_violations(zs, h, spec) });
    }
    let taus: Vec<f64> = fits.into_iter().flatten().collect();
    let mut r = result(AteMethod::SmoothedAipw, stats::mean(&taus), influence_se(&psi.psi), level, n)?;
    r.smoothing_moderators = Some(z.names.clone());
    r.bandwidth = Some(h);
    r.kernel_order = Some(spec.order);
    Ok(r)
}

/// One pairwise comparison of two ATE results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteComparison {
    pub first: String,
    pub second: String,
    pub difference: f64,
    /// `|difference| / max(SE₁, SE₂)`.
    pub difference_in_se: f64,
    /// `SE₁ / SE₂`.
    pub se_ratio: f64,
}

/// Label for a result: the method, plus the moderators for smoothed ones.
pub fn label(r: &AteResult) -> String {
    match &r.smoothing_moderators {
        Some(m) => format!("{}({})", r.method.name(), m.join("+")),
        None => r.method.name().to_string(),
    }
}

/// All pairwise differences, in input order.
pub fn compare_ate(results: &[AteResult]) -> Result<Vec<AteComparison>> {
    if results.len() < 2 {
        return Err(Error::Validation("comparison needs at least two results".into()));
    }
    let mut out = Vec::new();
    for i in 0..results.len() {
        for j in i + 1..results.len() {
            let (a, b) = (&results[i], &results[j]);
            let diff = a.estimate - b.estimate;
            let larger = a.std_error.max(b.std_error);
            out.push(AteComparison {
                first: label(a),
                second: label(b),
                difference: diff,
                difference_in_se: if larger > 0.0 { diff.abs() / larger } else { 0.0 },
                se_ratio: a.std_error / b.std_error,
            });
        }
    }
    Ok(out)
}

/// Writes the comparison as CSV.
pub fn write_comparison_csv(rows: &[AteComparison], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["first", "second", "difference", "difference_in_se", "se_ratio"])?;
    for r in rows {
        w.write_record([
            r.first.clone(),
            r.second.clone(),
            format!("{:?}", r.difference),
            format!("{:?}", r.difference_in_se),
            format!("{:?}", r.se_ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}
