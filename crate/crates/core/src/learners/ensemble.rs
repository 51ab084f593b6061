use nalgebra::DMatrix;
use serde::Serialize;

use super::{
    fit_forest, fit_logit, fit_ridge, mse, select_penalty, take, take_rows, Fitted, LearnerKind, LearnerSettings, Target,
};
use super::linear::{fit_elastic_net_prepared, Penalty, Prepared};
use super::logit::fit_penalized_logit;
use crate::data::make_folds;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub kind: LearnerKind,
    pub model: Fitted,
    pub penalty: Option<Penalty>,
    /// Out-of-sample predictions on the training rows.
    pub oof: Vec<f64>,
    pub cv_mse: f64,
}

/// Convex combination of fitted learners.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub members: Vec<EnsembleMember>,
    pub weights: Vec<f64>,
    pub cv_mse: f64,
    /// Learners that failed to fit, with the reason.
    pub failures: Vec<(LearnerKind, String)>,
}

/// Compact description of a fitted ensemble for reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub members: Vec<String>,
    pub weights: Vec<f64>,
    pub member_cv_mse: Vec<f64>,
    pub cv_mse: f64,
    pub failures: Vec<String>,
}

impl EnsembleModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; x.nrows()];
        for (m, w) in self.members.iter().zip(&self.weights) {
            if *w == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(m.model.predict(x)) {
                *o += w * p;
            }
        }
        out
    }

    pub fn summary(&self) -> EnsembleSummary {
        EnsembleSummary {
            members: self.members.iter().map(|m| m.kind.name().to_string()).collect(),
            weights: self.weights.clone(),
            member_cv_mse: self.members.iter().map(|m| m.cv_mse).collect(),
            cv_mse: self.cv_mse,
            failures: self.failures.iter().map(|(k, e)| format!("{}: {e}", k.name())).collect(),
        }
    }
}

fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cum += uk;
        let t = (cum - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Minimizes `‖t − P·w‖²` over the probability simplex, where the columns of
/// `P` are `cols`.
///
/// Projected gradient descent started from the best single column; each step
/// is non-increasing, so the result is never worse than the best vertex.
pub fn simplex_least_squares(cols: &[Vec<f64>], t: &[f64]) -> Vec<f64> {
    let k = cols.len();
    if k == 1 {
        return vec![1.0];
    }
    let n = t.len() as f64;
    let a = DMatrix::from_fn(k, k, |r, c| cols[r].iter().zip(&cols[c]).map(|(x, y)| x * y).sum::<f64>() / n);
    let b: Vec<f64> = cols.iter().map(|c| c.iter().zip(t).map(|(x, y)| x * y).sum::<f64>() / n).collect();
    let objective = |w: &[f64]| -> f64 {
        let mut q = 0.0;
        for r in 0..k {
            for c in 0..k {
                q += w[r] * a[(r, c)] * w[c];
            }
        }
        q - 2.0 * b.iter().zip(w).map(|(x, y)| x * y).sum::<f64>()
    };
    let start = (0..k)
        .min_by(|&i, &j| (a[(i, i)] - 2.0 * b[i]).total_cmp(&(a[(j, j)] - 2.0 * b[j])))
        .unwrap();
    let mut w = vec![0.0; k];
    w[start] = 1.0;
    // Row-sum bound on the largest eigenvalue of A; gradient Lipschitz constant is 2·λmax.
    let lip = 2.0 * (0..k).map(|r| (0..k).map(|c| a[(r, c)].abs()).sum::<f64>()).fold(0.0, f64::max);
    if lip <= 0.0 {
        return w;
    }
    let mut obj = objective(&w);
    for _ in 0..50_000 {
        let grad: Vec<f64> = (0..k).map(|r| 2.0 * ((0..k).map(|c| a[(r, c)] * w[c]).sum::<f64>() - b[r])).collect();
        let step: Vec<f64> = w.iter().zip(&grad).map(|(x, g)| x - g / lip).collect();
        let next = project_to_simplex(&step);
        let next_obj = objective(&next);
        let moved = next.iter().zip(&w).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if next_obj > obj {
            break;
        }
        w = next;
        obj = next_obj;
        if moved < 1e-13 {
            break;
        }
    }
    w
}

fn bare(kind: LearnerKind, model: Fitted) -> EnsembleMember {
    EnsembleMember { kind, model, penalty: None, oof: Vec::new(), cv_mse: f64::NAN }
}

fn kfold_oof<F>(x: &DMatrix<f64>, t: &[f64], folds: usize, seed: u64, fit: F) -> Result<Vec<f64>>
where
    F: Fn(&DMatrix<f64>, &[f64], &DMatrix<f64>) -> Result<Vec<f64>>,
{
    let n = t.len();
    let plan = make_folds(n, folds, rng::derive_seed(seed, &[rng::tag::CV]))?;
    let mut oof = vec![0.0; n];
    for fold in 1..=plan.folds {
        let train = plan.rows_outside(fold);
        let val = plan.rows_in(fold);
        let pred = fit(&take_rows(x, &train), &take(t, &train), &take_rows(x, &val))?;
        for (&i, p) in val.iter().zip(pred) {
            oof[i] = p;
        }
    }
    Ok(oof)
}

/// Fits one learner on all rows and produces its out-of-sample predictions.
///
/// Penalized learners reuse the out-of-fold predictions of their penalty
/// search at the selected penalty; forests use out-of-bag predictions;
/// the rest use plain K-fold predictions. All K-fold splits share `seed`.
/// With `need_oof` false, learners without a tuning step skip the K-fold
/// pass and report an empty `oof` and NaN `cv_mse`.
pub(crate) fn fit_member(
    kind: LearnerKind,
    x: &DMatrix<f64>,
    t: &[f64],
    target: Target,
    settings: &LearnerSettings,
    seed: u64,
    need_oof: bool,
) -> Result<EnsembleMember> {
    let k = settings.cv_folds;
    let (model, penalty, oof) = match kind {
        LearnerKind::Mean => {
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            if !need_oof {
                return Ok(bare(kind, Fitted::Mean(mean)));
            }
            let oof = kfold_oof(x, t, k, seed, |_, tt, xv| {
                Ok(vec![tt.iter().sum::<f64>() / tt.len() as f64; xv.nrows()])
            })?;
            (Fitted::Mean(mean), None, oof)
        }
        LearnerKind::Ols => {
            if !need_oof {
                return Ok(bare(kind, Fitted::Linear(fit_ridge(x, t, 0.0)?)));
            }
            let oof = kfold_oof(x, t, k, seed, |xt, tt, xv| Ok(fit_ridge(xt, tt, 0.0)?.predict(xv)))?;
            (Fitted::Linear(fit_ridge(x, t, 0.0)?), None, oof)
        }
        LearnerKind::Logit => {
            let (tol, it) = (settings.irls_tol, settings.irls_max_iter);
            if !need_oof {
                return Ok(bare(kind, Fitted::Logit(fit_logit(x, t, tol, it)?)));
            }
            let oof = kfold_oof(x, t, k, seed, |xt, tt, xv| Ok(fit_logit(xt, tt, tol, it)?.predict(xv)))?;
            (Fitted::Logit(fit_logit(x, t, tol, it)?), None, oof)
        }
        LearnerKind::Forest => {
            let fseed = rng::derive_seed(seed, &[rng::tag::MEMBER, kind as u64]);
            let f = fit_forest(x, t, &settings.forest, target, fseed)?;
            let oof = f.oob.clone();
            (Fitted::Forest(f), None, oof)
        }
        LearnerKind::Ridge => {
            let sel = select_penalty(x, t, kind, None, settings, seed)?;
            (Fitted::Linear(fit_ridge(x, t, sel.penalty.lambda)?), Some(sel.penalty), sel.oof)
        }
        LearnerKind::Lasso | LearnerKind::ElasticNet => {
            let sel = select_penalty(x, t, kind, None, settings, seed)?;
            let prep = Prepared::new(x, t);
            let mut beta = vec![0.0; x.ncols()];
            let m = fit_elastic_net_prepared(&prep, sel.penalty, &mut beta, settings.cd_tol, settings.cd_max_sweeps)?;
            (Fitted::Linear(m), Some(sel.penalty), sel.oof)
        }
        LearnerKind::RidgeLogit | LearnerKind::LassoLogit | LearnerKind::ElasticNetLogit => {
            let sel = select_penalty(x, t, kind, None, settings, seed)?;
            let m = fit_penalized_logit(
                x,
                t,
                sel.penalty,
                settings.irls_tol,
                settings.irls_max_iter,
                settings.cd_tol,
                settings.cd_max_sweeps,
                None,
            )?;
            (Fitted::Logit(m), Some(sel.penalty), sel.oof)
        }
    };
    let cv_mse = mse(&oof, t);
    Ok(EnsembleMember { kind, model, penalty, oof, cv_mse })
}

/// Stacks `kinds` with simplex weights that minimize out-of-sample MSE, then
/// keeps every member refitted on all rows. Members that fail are dropped and
/// listed in `failures`.
pub fn fit_ensemble(
    x: &DMatrix<f64>,
    t: &[f64],
    kinds: &[LearnerKind],
    target: Target,
    settings: &LearnerSettings,
    seed: u64,
) -> Result<EnsembleModel> {
    if kinds.is_empty() {
        return Err(Error::Config("ensemble needs at least one learner".into()));
    }
    let mut members = Vec::new();
    let mut failures = Vec::new();
    let need_oof = kinds.len() > 1;
    for &kind in kinds {
        match fit_member(kind, x, t, target, settings, seed, need_oof) {
            Ok(m) => members.push(m),
            Err(e) => failures.push((kind, e.to_string())),
        }
    }
    if members.is_empty() {
        return Err(Error::AllMembersFailed(
            failures.iter().map(|(k, e)| format!("{}: {e}", k.name())).collect(),
        ));
    }
    if members.len() == 1 {
        let cv_mse = members[0].cv_mse;
        return Ok(EnsembleModel { members, weights: vec![1.0], cv_mse, failures });
    }
    let cols: Vec<Vec<f64>> = members.iter().map(|m| m.oof.clone()).collect();
    let weights = simplex_least_squares(&cols, t);
    let combined: Vec<f64> = (0..t.len())
        .map(|i| cols.iter().zip(&weights).map(|(c, w)| w * c[i]).sum())
        .collect();
    let cv_mse = mse(&combined, t);
    Ok(EnsembleModel { members, weights, cv_mse, failures })
}
