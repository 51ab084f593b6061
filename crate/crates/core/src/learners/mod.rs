//! First-stage supervised learners and the stacking ensemble.
//!
//! Linear learners (OLS, ridge, lasso, elastic net and their logistic
//! counterparts) work on standardized features; the random forest works on
//! raw features. [`fit_ensemble`] combines any mix of them with simplex
//! weights chosen by out-of-sample MSE.

mod cv;
mod ensemble;
mod forest;
mod linear;
mod logit;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use cv::{lambda_grid, select_penalty, PenaltySelection};
pub use ensemble::{fit_ensemble, simplex_least_squares, EnsembleMember, EnsembleModel, EnsembleSummary};
pub use forest::{fit_forest, ForestModel, ForestParams, Node, Tree};
pub use linear::{elastic_net_objective, fit_elastic_net, fit_ridge, kkt_residual, LinearModel, Penalty};
pub use logit::{fit_logit, fit_penalized_logit, LogitModel};

use crate::error::Result;

/// Per-column centring and scaling learned at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    /// Population mean and SD per column. Zero-variance columns get scale 0
    /// and map to 0 after transformation.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut scales = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.iter().sum::<f64>() / n;
            let v = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let s = v.sqrt();
            means.push(m);
            scales.push(if s > 1e-12 * (1.0 + m.abs()) { s } else { 0.0 });
        }
        Standardizer { means, scales }
    }

    pub fn is_active(&self, j: usize) -> bool {
        self.scales[j] > 0.0
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.means[j], self.scales[j]);
            if s > 0.0 {
                col.iter_mut().for_each(|v| *v = (*v - m) / s);
            } else {
                col.fill(0.0);
            }
        }
        out
    }
}

/// Whether a learner predicts a real outcome or a probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Regression,
    Probability,
}

/// Learners available to the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    /// Intercept-only model (sample mean).
    Mean,
    Ols,
    Ridge,
    Lasso,
    ElasticNet,
    Forest,
    Logit,
    RidgeLogit,
    LassoLogit,
    ElasticNetLogit,
}

impl LearnerKind {
    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Mean => "mean",
            LearnerKind::Ols => "ols",
            LearnerKind::Ridge => "ridge",
            LearnerKind::Lasso => "lasso",
            LearnerKind::ElasticNet => "elastic_net",
            LearnerKind::Forest => "forest",
            LearnerKind::Logit => "logit",
            LearnerKind::RidgeLogit => "ridge_logit",
            LearnerKind::LassoLogit => "lasso_logit",
            LearnerKind::ElasticNetLogit => "elastic_net_logit",
        }
    }

    /// True for learners whose predictions are probabilities.
    pub fn is_classifier(self) -> bool {
        matches!(
            self,
            LearnerKind::Logit | LearnerKind::RidgeLogit | LearnerKind::LassoLogit | LearnerKind::ElasticNetLogit
        )
    }

    /// Mixing weight for penalized kinds; `None` when no penalty is tuned.
    pub fn alpha(self, en_alpha: f64) -> Option<f64> {
        match self {
            LearnerKind::Ridge | LearnerKind::RidgeLogit => Some(0.0),
            LearnerKind::Lasso | LearnerKind::LassoLogit => Some(1.0),
            LearnerKind::ElasticNet | LearnerKind::ElasticNetLogit => Some(en_alpha),
            _ => None,
        }
    }
}

/// Hyper-parameters shared by all learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSettings {
    pub cv_folds: usize,
    pub grid_points: usize,
    pub grid_ratio: f64,
    pub en_alpha: f64,
    pub cd_tol: f64,
    pub cd_max_sweeps: usize,
    pub irls_tol: f64,
    pub irls_max_iter: usize,
    pub forest: ForestParams,
}

impl Default for LearnerSettings {
    fn default() -> Self {
        LearnerSettings {
            cv_folds: 5,
            grid_points: 50,
            grid_ratio: 1e-3,
            en_alpha: 0.5,
            cd_tol: 1e-7,
            cd_max_sweeps: 10_000,
            irls_tol: 1e-8,
            irls_max_iter: 100,
            forest: ForestParams::default(),
        }
    }
}

/// A fitted learner of any kind.
#[derive(Debug, Clone)]
pub enum Fitted {
    Mean(f64),
    Linear(LinearModel),
    Logit(LogitModel),
    Forest(ForestModel),
}

impl Fitted {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        match self {
            Fitted::Mean(m) => vec![*m; x.nrows()],
            Fitted::Linear(m) => m.predict(x),
            Fitted::Logit(m) => m.predict(x),
            Fitted::Forest(m) => m.predict(x),
        }
    }
}

/// Rows `rows` of `x`.
pub(crate) fn take_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    x.select_rows(rows)
}

pub(crate) fn take(v: &[f64], rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| v[i]).collect()
}

pub(crate) fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Fits a single learner with default penalty selection and returns the
/// model; see [`fit_ensemble`] for out-of-fold predictions.
pub fn fit_learner(
    kind: LearnerKind,
    x: &DMatrix<f64>,
    t: &[f64],
    target: Target,
    settings: &LearnerSettings,
    seed: u64,
) -> Result<Fitted> {
    ensemble::fit_member(kind, x, t, target, settings, seed, false).map(|m| m.model)
}
