//! Cross-fitted nuisance estimation.
//!
//! For every fold the propensity score is fitted on the complement's
//! `(X, D)`, and the two outcome regressions on the complement's untreated and
//! treated rows. All three are then predicted on the fold itself, so no row's
//! prediction ever depends on its own fold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FoldPlan};
use crate::error::{Error, Result};
use crate::learners::{fit_ensemble, take_rows, EnsembleSummary, LearnerKind, LearnerSettings, Target};
use crate::rng;
use crate::stats;

/// Learners used for the first stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    pub propensity: Vec<LearnerKind>,
    pub outcome: Vec<LearnerKind>,
    pub settings: LearnerSettings,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            propensity: vec![
                LearnerKind::ElasticNetLogit,
                LearnerKind::LassoLogit,
                LearnerKind::RidgeLogit,
                LearnerKind::Forest,
            ],
            outcome: vec![LearnerKind::Lasso, LearnerKind::ElasticNet, LearnerKind::Ridge, LearnerKind::Forest],
            settings: LearnerSettings::default(),
        }
    }
}

impl NuisanceConfig {
    /// Single-learner configuration, e.g. the parametric logit/OLS baseline.
    pub fn single(propensity: LearnerKind, outcome: LearnerKind) -> Self {
        NuisanceConfig { propensity: vec![propensity], outcome: vec![outcome], settings: LearnerSettings::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.propensity.is_empty() || self.outcome.is_empty() {
            return Err(Error::Validation("learner lists must not be empty".into()));
        }
        if self.settings.cv_folds < 2 {
            return Err(Error::Validation("learners.settings.cv_folds must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.settings.en_alpha) {
            return Err(Error::Validation("learners.settings.en_alpha must lie in [0, 1]".into()));
        }
        if self.settings.grid_points == 0 || !(self.settings.grid_ratio > 0.0 && self.settings.grid_ratio < 1.0) {
            return Err(Error::Validation("penalty grid needs grid_points ≥ 1 and grid_ratio in (0, 1)".into()));
        }
        if self.settings.forest.n_trees == 0 {
            return Err(Error::Validation("forest.n_trees must be positive".into()));
        }
        Ok(())
    }
}

/// What was fitted for one fold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_predicted: usize,
    pub n_train_treated: usize,
    pub n_train_untreated: usize,
    pub propensity: EnsembleSummary,
    pub outcome0: EnsembleSummary,
    pub outcome1: EnsembleSummary,
}

/// Out-of-fold nuisance predictions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuisanceFits {
    /// Clipped propensity predictions.
    pub p_hat: Vec<f64>,
    /// Propensity predictions before clipping.
    pub p_raw: Vec<f64>,
    pub m0_hat: Vec<f64>,
    pub m1_hat: Vec<f64>,
    pub fold_plan: FoldPlan,
    pub trim_c: f64,
    pub folds: Vec<FoldReport>,
}

impl NuisanceFits {
    /// Assembles fits from externally supplied nuisances (e.g. the true
    /// functions in a simulation), clipping `p` at `trim_c`.
    pub fn from_values(p: Vec<f64>, m0: Vec<f64>, m1: Vec<f64>, trim_c: f64) -> Result<Self> {
        let n = p.len();
        if m0.len() != n || m1.len() != n {
            return Err(Error::Validation("nuisance vectors differ in length".into()));
        }
        check_trim(trim_c)?;
        let p_hat = p.iter().map(|v| v.clamp(trim_c, 1.0 - trim_c)).collect();
        Ok(NuisanceFits {
            p_hat,
            p_raw: p,
            m0_hat: m0,
            m1_hat: m1,
            fold_plan: FoldPlan { assignments: vec![1; n], folds: 1, seed: 0 },
            trim_c,
            folds: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.p_hat.len()
    }
}

fn check_trim(trim_c: f64) -> Result<()> {
    if trim_c > 0.0 && trim_c < 0.5 {
        Ok(())
    } else {
        Err(Error::Validation(format!("trim_c must lie in (0, 0.5), got {trim_c}")))
    }
}

struct FoldOutput {
    rows: Vec<usize>,
    p: Vec<f64>,
    m0: Vec<f64>,
    m1: Vec<f64>,
    report: FoldReport,
}

fn fit_fold(ds: &Dataset, plan: &FoldPlan, fold: usize, config: &NuisanceConfig, seed: u64) -> Result<FoldOutput> {
    let train = plan.rows_outside(fold);
    let rows = plan.rows_in(fold);
    let (treated, untreated): (Vec<usize>, Vec<usize>) = train.iter().partition(|&&i| ds.d[i] == 1);
    if treated.is_empty() {
        return Err(Error::Stratification { fold, arm: "treated" });
    }
    if untreated.is_empty() {
        return Err(Error::Stratification { fold, arm: "untreated" });
    }
    let x_pred = take_rows(&ds.x, &rows);
    let f = fold as u64;
    let settings = &config.settings;

    let dt: Vec<f64> = train.iter().map(|&i| f64::from(ds.d[i])).collect();
    let prop = fit_ensemble(
        &take_rows(&ds.x, &train),
        &dt,
        &config.propensity,
        Target::Probability,
        settings,
        rng::derive_seed(seed, &[rng::tag::PROPENSITY, f]),
    )?;
    let fit_outcome = |arm_rows: &[usize], tag: u64| {
        let y: Vec<f64> = arm_rows.iter().map(|&i| ds.y[i]).collect();
        fit_ensemble(
            &take_rows(&ds.x, arm_rows),
            &y,
            &config.outcome,
            Target::Regression,
            settings,
            rng::derive_seed(seed, &[tag, f]),
        )
    };
    let out0 = fit_outcome(&untreated, rng::tag::OUTCOME0)?;
    let out1 = fit_outcome(&treated, rng::tag::OUTCOME1)?;
    Ok(FoldOutput {
        p: prop.predict(&x_pred),
        m0: out0.predict(&x_pred),
        m1: out1.predict(&x_pred),
        report: FoldReport {
            fold,
            n_predicted: rows.len(),
            n_train_treated: treated.len(),
            n_train_untreated: untreated.len(),
            propensity: prop.summary(),
            outcome0: out0.summary(),
            outcome1: out1.summary(),
        },
        rows,
    })
}

/// Cross-fits the propensity score and both outcome regressions over `plan`
/// and clips the propensity into `[trim_c, 1 − trim_c]`.
pub fn cross_fit(ds: &Dataset, plan: &FoldPlan, config: &NuisanceConfig, trim_c: f64, seed: u64) -> Result<NuisanceFits> {
    check_trim(trim_c)?;
    config.validate()?;
    if plan.assignments.len() != ds.n() {
        return Err(Error::Validation("fold plan length differs from the sample size".into()));
    }
    let outputs: Vec<FoldOutput> = (1..=plan.folds)
        .into_par_iter()
        .map(|fold| fit_fold(ds, plan, fold, config, seed))
        .collect::<Result<_>>()?;
    let n = ds.n();
    let (mut p_raw, mut m0, mut m1) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut folds = Vec::with_capacity(outputs.len());
    for out in outputs {
        for (k, &i) in out.rows.iter().enumerate() {
            p_raw[i] = out.p[k];
            m0[i] = out.m0[k];
            m1[i] = out.m1[k];
        }
        folds.push(out.report);
    }
    let p_hat = p_raw.iter().map(|v| v.clamp(trim_c, 1.0 - trim_c)).collect();
    Ok(NuisanceFits { p_hat, p_raw, m0_hat: m0, m1_hat: m1, fold_plan: plan.clone(), trim_c, folds })
}

/// Overlap diagnostics for the propensity predictions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportReport {
    pub n: usize,
    pub trim_c: f64,
    pub min: f64,
    pub max: f64,
    pub raw_min: f64,
    pub raw_max: f64,
    /// Deciles 10%, ..., 90% of the clipped predictions.
    pub deciles: Vec<f64>,
    pub clipped_low_treated: usize,
    pub clipped_low_untreated: usize,
    pub clipped_high_treated: usize,
    pub clipped_high_untreated: usize,
    pub clip_count: usize,
    pub clip_fraction: f64,
    /// Set when more than 5% of predictions were clipped.
    pub overlap_warning: bool,
}

pub const CLIP_WARNING_FRACTION: f64 = 0.05;

pub fn support_report(fits: &NuisanceFits, d: &[u8]) -> SupportReport {
    let n = fits.n();
    let sorted = stats::sorted(&fits.p_hat);
    let (mut lt, mut lu, mut ht, mut hu) = (0, 0, 0, 0);
    for (i, &p) in fits.p_raw.iter().enumerate() {
        let treated = d.get(i) == Some(&1);
        if p < fits.trim_c {
            if treated { lt += 1 } else { lu += 1 }
        } else if p > 1.0 - fits.trim_c {
            if treated { ht += 1 } else { hu += 1 }
        }
    }
    let clip_count = lt + lu + ht + hu;
    let clip_fraction = clip_count as f64 / n as f64;
    SupportReport {
        n,
        trim_c: fits.trim_c,
        min: sorted[0],
        max: sorted[n - 1],
        raw_min: fits.p_raw.iter().copied().fold(f64::INFINITY, f64::min),
        raw_max: fits.p_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        deciles: (1..10).map(|k| stats::quantile_sorted(&sorted, k as f64 / 10.0)).collect(),
        clipped_low_treated: lt,
        clipped_low_untreated: lu,
        clipped_high_treated: ht,
        clipped_high_untreated: hu,
        clip_count,
        clip_fraction,
        overlap_warning: clip_fraction > CLIP_WARNING_FRACTION,
    }
}
