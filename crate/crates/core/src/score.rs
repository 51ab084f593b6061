//! Per-observation pseudo-outcomes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crossfit::NuisanceFits;
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    /// Augmented inverse-propensity weighting (doubly robust).
    Aipw,
    /// Inverse-propensity weighting only.
    Ipw,
    /// Difference of the outcome regressions.
    Outcome,
}

impl ScoreVariant {
    pub fn name(self) -> &'static str {
        match self {
            ScoreVariant::Aipw => "aipw",
            ScoreVariant::Ipw => "ipw",
            ScoreVariant::Outcome => "outcome",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreVector {
    pub psi: Vec<f64>,
    pub variant: ScoreVariant,
    /// Trimming constant of the nuisance fits the scores were built from.
    pub trim_c: f64,
}

impl ScoreVector {
    pub fn n(&self) -> usize {
        self.psi.len()
    }

    /// Writes `row,psi,variant` lines (0-based rows).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["row", "psi", "variant"])?;
        for (i, v) in self.psi.iter().enumerate() {
            w.write_record([i.to_string(), format!("{v:?}"), self.variant.name().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check(ds: &Dataset, fits: &NuisanceFits) -> Result<()> {
    if fits.n() != ds.n() {
        return Err(Error::Validation(format!(
            "nuisance fits cover {} rows but the dataset has {}",
            fits.n(),
            ds.n()
        )));
    }
    Ok(())
}

pub fn aipw_value(d: u8, y: f64, p: f64, m0: f64, m1: f64) -> f64 {
    if d == 1 {
        (y - m1) / p + m1 - m0
    } else {
        -(y - m0) / (1.0 - p) + m1 - m0
    }
}

pub fn ipw_value(d: u8, y: f64, p: f64) -> f64 {
    if d == 1 {
        y / p
    } else {
        -y / (1.0 - p)
    }
}

pub fn score(ds: &Dataset, fits: &NuisanceFits, variant: ScoreVariant) -> Result<ScoreVector> {
    check(ds, fits)?;
    let psi = (0..ds.n())
        .map(|i| {
            let (d, y, p, m0, m1) = (ds.d[i], ds.y[i], fits.p_hat[i], fits.m0_hat[i], fits.m1_hat[i]);
            match variant {
                ScoreVariant::Aipw => aipw_value(d, y, p, m0, m1),
                ScoreVariant::Ipw => ipw_value(d, y, p),
                ScoreVariant::Outcome => m1 - m0,
            }
        })
        .collect();
    Ok(ScoreVector { psi, variant, trim_c: fits.trim_c })
}

pub fn aipw_score(ds: &Dataset, fits: &NuisanceFits) -> Result<ScoreVector> {
    score(ds, fits, ScoreVariant::Aipw)
}

pub fn ipw_score(ds: &Dataset, fits: &NuisanceFits) -> Result<ScoreVector> {
    score(ds, fits, ScoreVariant::Ipw)
}

pub fn outcome_score(ds: &Dataset, fits: &NuisanceFits) -> Result<ScoreVector> {
    score(ds, fits, ScoreVariant::Outcome)
}
