use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::linear::{fit_elastic_net_prepared, Penalty, Prepared};
use super::logit::fit_penalized_standardized;
use super::{mse, take, take_rows, LearnerKind, LearnerSettings, Standardizer};
use crate::data::make_folds;
use crate::error::{Error, Result};
use crate::rng;

/// Outcome of K-fold penalty selection.
///
/// `penalty.lambda` is on the learner's native scale: the `Σ(t − ŷ)²`
/// scale of [`super::fit_ridge`] for ridge, the per-observation scale of the
/// elastic net otherwise. `grid` holds the per-observation values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySelection {
    pub penalty: Penalty,
    pub grid: Vec<f64>,
    pub cv_mse: Vec<f64>,
    pub best_index: usize,
    /// Out-of-fold predictions at the selected penalty.
    pub oof: Vec<f64>,
}

/// `points` log-spaced values from `lambda_max` down to `ratio · lambda_max`.
pub fn lambda_grid(lambda_max: f64, points: usize, ratio: f64) -> Vec<f64> {
    if points <= 1 {
        return vec![lambda_max];
    }
    let (hi, lo) = (lambda_max.ln(), (lambda_max * ratio).ln());
    (0..points)
        .map(|k| (hi + (lo - hi) * k as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Smallest per-observation penalty at which every coefficient is zero
/// (for `alpha = 0` the glmnet convention `alpha = 0.001` is used).
pub(crate) fn null_lambda(x: &DMatrix<f64>, t: &[f64], alpha: f64) -> f64 {
    let n = t.len() as f64;
    let std = Standardizer::fit(x);
    let tbar = t.iter().sum::<f64>() / n;
    let mut best: f64 = 0.0;
    for j in 0..x.ncols() {
        if !std.is_active(j) {
            continue;
        }
        let (m, s) = (std.means[j], std.scales[j]);
        let c: f64 = x.column(j).iter().zip(t).map(|(v, y)| (v - m) / s * (y - tbar)).sum::<f64>() / n;
        best = best.max(c.abs());
    }
    let lmax = best / alpha.max(1e-3);
    if lmax > 0.0 {
        lmax
    } else {
        1.0
    }
}

/// Picks the penalty with the smallest K-fold out-of-fold MSE, breaking ties
/// toward stronger regularization.
pub fn select_penalty(
    x: &DMatrix<f64>,
    t: &[f64],
    kind: LearnerKind,
    grid: Option<&[f64]>,
    settings: &LearnerSettings,
    seed: u64,
) -> Result<PenaltySelection> {
    let alpha = kind
        .alpha(settings.en_alpha)
        .ok_or_else(|| Error::Config(format!("learner '{}' has no penalty to select", kind.name())))?;
    let n = t.len();
    if settings.cv_folds < 2 {
        return Err(Error::Validation("cross-validation needs at least 2 folds".into()));
    }
    let mut grid: Vec<f64> = match grid {
        Some(g) if !g.is_empty() => g.to_vec(),
        Some(_) => return Err(Error::Validation("penalty grid is empty".into())),
        // The path always ends at `grid_ratio` times the lasso null penalty, so
        // ridge and elastic-net paths reach the same weak-penalty end as lasso.
        None => lambda_grid(null_lambda(x, t, alpha), settings.grid_points, settings.grid_ratio * alpha.clamp(1e-3, 1.0)),
    };
    grid.sort_by(|a, b| b.total_cmp(a));
    let plan = make_folds(n, settings.cv_folds, rng::derive_seed(seed, &[rng::tag::CV]))?;
    let mut oof = vec![vec![f64::NAN; n]; grid.len()];
    for fold in 1..=plan.folds {
        let train = plan.rows_outside(fold);
        let val = plan.rows_in(fold);
        let xt = take_rows(x, &train);
        let tt = take(t, &train);
        let xv = take_rows(x, &val);
        let preds = path_predictions(&xt, &tt, &xv, kind, alpha, &grid, settings);
        for (g, pv) in preds.into_iter().enumerate() {
            if let Some(pv) = pv {
                for (&i, p) in val.iter().zip(pv) {
                    oof[g][i] = p;
                }
            }
        }
    }
    let cv_mse: Vec<f64> = oof
        .iter()
        .map(|o| if o.iter().any(|v| v.is_nan()) { f64::INFINITY } else { mse(o, t) })
        .collect();
    let mut best_index = None;
    for (g, m) in cv_mse.iter().enumerate() {
        if m.is_finite() && best_index.is_none_or(|b: usize| *m < cv_mse[b]) {
            best_index = Some(g);
        }
    }
    let best_index = best_index.ok_or_else(|| {
        Error::Numerical(format!("every penalty on the grid failed for '{}'", kind.name()))
    })?;
    let per_obs = grid[best_index];
    let lambda = if matches!(kind, LearnerKind::Ridge) { per_obs * n as f64 } else { per_obs };
    Ok(PenaltySelection {
        penalty: Penalty { lambda, alpha },
        grid,
        cv_mse,
        best_index,
        oof: oof.swap_remove(best_index),
    })
}

/// Validation predictions for every grid value (descending), `None` where the
/// fit failed.
fn path_predictions(
    xt: &DMatrix<f64>,
    tt: &[f64],
    xv: &DMatrix<f64>,
    kind: LearnerKind,
    alpha: f64,
    grid: &[f64],
    settings: &LearnerSettings,
) -> Vec<Option<Vec<f64>>> {
    match kind {
        LearnerKind::Ridge => ridge_path(xt, tt, xv, grid),
        LearnerKind::Lasso | LearnerKind::ElasticNet => {
            let prep = Prepared::new(xt, tt);
            let mut beta = vec![0.0; xt.ncols()];
            grid.iter()
                .map(|&lambda| {
                    fit_elastic_net_prepared(&prep, Penalty { lambda, alpha }, &mut beta, settings.cd_tol, settings.cd_max_sweeps)
                        .ok()
                        .map(|m| m.predict(xv))
                })
                .collect()
        }
        _ => {
            let n = tt.len();
            let mean = tt.iter().sum::<f64>() / n as f64;
            if mean == 0.0 || mean == 1.0 {
                return vec![None; grid.len()];
            }
            let std = Standardizer::fit(xt);
            let xs = std.transform(xt);
            let mut warm = None;
            grid.iter()
                .map(|&lambda| {
                    let fit = fit_penalized_standardized(
                        &xs,
                        std.clone(),
                        tt,
                        mean,
                        Penalty { lambda, alpha },
                        settings.irls_tol,
                        settings.irls_max_iter,
                        settings.cd_tol,
                        settings.cd_max_sweeps,
                        warm.as_ref(),
                    )
                    .ok();
                    let pred = fit.as_ref().map(|m| m.predict(xv));
                    warm = fit;
                    pred
                })
                .collect()
        }
    }
}

/// Ridge solutions for a whole grid from one eigendecomposition of the
/// standardized Gram matrix. Grid values are per observation.
fn ridge_path(xt: &DMatrix<f64>, tt: &[f64], xv: &DMatrix<f64>, grid: &[f64]) -> Vec<Option<Vec<f64>>> {
    let prep = Prepared::new(xt, tt);
    let n = prep.n as f64;
    let active: Vec<usize> = (0..xt.ncols()).filter(|&j| prep.std.is_active(j)).collect();
    let xv_s = prep.std.transform(xv);
    if active.is_empty() {
        return vec![Some(vec![prep.tbar; xv.nrows()]); grid.len()];
    }
    let k = active.len();
    let gram = DMatrix::from_fn(k, k, |r, c| prep.gram[(active[r], active[c])] * n);
    let rhs = DVector::from_iterator(k, active.iter().map(|&j| prep.corr[j] * n));
    let eig = SymmetricEigen::new(gram);
    let proj = eig.eigenvectors.tr_mul(&rhs);
    let xv_active = xv_s.select_columns(&active);
    grid.iter()
        .map(|&lambda| {
            let l = lambda * n;
            let scaled = DVector::from_iterator(
                k,
                proj.iter().zip(eig.eigenvalues.iter()).map(|(p, e)| {
                    let d = e.max(0.0) + l;
                    if d > 0.0 { p / d } else { 0.0 }
                }),
            );
            let beta = &eig.eigenvectors * scaled;
            let pred = &xv_active * beta;
            Some(pred.iter().map(|v| v + prep.tbar).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::fit_ridge;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn settings() -> LearnerSettings {
        LearnerSettings { cv_folds: 5, grid_points: 30, ..Default::default() }
    }

    #[test]
    fn singleton_grid_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(30, 3, |_, _| rng.random::<f64>());
        let t: Vec<f64> = (0..30).map(|i| x[(i, 0)]).collect();
        let s = select_penalty(&x, &t, LearnerKind::Lasso, Some(&[0.05]), &settings(), 3).unwrap();
        assert_eq!(s.penalty.lambda, 0.05);
        assert_eq!(s.best_index, 0);
    }

    #[test]
    fn every_path_ends_at_the_lasso_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(80, 4, |_, _| rng.random::<f64>());
        let t: Vec<f64> = (0..80).map(|i| x[(i, 0)] + 0.1 * rng.random::<f64>()).collect();
        let s = settings();
        let floor = null_lambda(&x, &t, 1.0) * s.grid_ratio;
        for kind in [LearnerKind::Lasso, LearnerKind::ElasticNet, LearnerKind::RidgeLogit] {
            let t = if kind.is_classifier() { t.iter().map(|v| f64::from(*v > 0.5)).collect() } else { t.clone() };
            let floor = if kind.is_classifier() { null_lambda(&x, &t, 1.0) * s.grid_ratio } else { floor };
            let sel = select_penalty(&x, &t, kind, None, &s, 1).unwrap();
            let last = *sel.grid.last().unwrap();
            assert!((last - floor).abs() < 1e-12 * floor.max(1.0), "{kind:?}: {last} vs {floor}");
        }
    }

    #[test]
    fn pure_noise_selects_largest_penalty() {
        let mut at_max = 0;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = DMatrix::from_fn(60, 5, |_, _| rng.random::<f64>() - 0.5);
            let t: Vec<f64> = (0..60).map(|_| rng.random::<f64>() - 0.5).collect();
            let s = select_penalty(&x, &t, LearnerKind::Lasso, None, &settings(), seed).unwrap();
            if s.best_index == 0 {
                at_max += 1;
            }
        }
        assert!(at_max > 25, "grid maximum chosen in {at_max}/50 runs");
    }

    #[test]
    fn sparse_signal_argmin_beats_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(100, 10, |_, _| rng.random::<f64>() - 0.5);
        let t: Vec<f64> = (0..100).map(|i| 3.0 * x[(i, 0)] - 2.0 * x[(i, 3)] + 0.1 * rng.random::<f64>()).collect();
        for kind in [LearnerKind::Lasso, LearnerKind::ElasticNet, LearnerKind::Ridge] {
            let s = select_penalty(&x, &t, kind, None, &LearnerSettings { grid_points: 50, ..settings() }, 1).unwrap();
            let chosen = s.cv_mse[s.best_index];
            assert!(chosen <= s.cv_mse[0] && chosen <= *s.cv_mse.last().unwrap());
            assert!(s.best_index > 0, "{kind:?} should not pick the null model");
        }
    }

    #[test]
    fn ridge_path_matches_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(25, 4, |_, _| rng.random::<f64>());
        let t: Vec<f64> = (0..25).map(|i| x[(i, 1)] + rng.random::<f64>()).collect();
        let grid = [2.0, 0.3];
        let path = ridge_path(&x, &t, &x, &grid);
        for (g, lam) in grid.iter().enumerate() {
            let direct = fit_ridge(&x, &t, lam * 25.0).unwrap().predict(&x);
            for (a, b) in path[g].as_ref().unwrap().iter().zip(&direct) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn penalized_logit_selection_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(150, 4, |_, _| rng.random::<f64>() - 0.5);
        let t: Vec<f64> = (0..150)
            .map(|i| f64::from(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-4.0 * x[(i, 0)]).exp()))))
            .collect();
        let s = select_penalty(&x, &t, LearnerKind::LassoLogit, None, &settings(), 2).unwrap();
        assert!(s.oof.iter().all(|p| *p > 0.0 && *p < 1.0));
        assert!(s.best_index > 0);
    }
}
