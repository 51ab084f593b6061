use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Standardizer;
use crate::error::{Error, Result};

/// Penalty strength `lambda` and mixing weight `alpha` (0 = ridge, 1 = lasso).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub lambda: f64,
    pub alpha: f64,
}

/// Affine model fitted on standardized features.
///
/// `std_coefficients` act on standardized features; `coefficients` and
/// `intercept` are the same model expressed on the raw feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub std_intercept: f64,
    pub std_coefficients: Vec<f64>,
    pub standardization: Standardizer,
    pub penalty: Penalty,
    pub sweeps: usize,
}

impl LinearModel {
    fn from_std(standardization: Standardizer, std_intercept: f64, std_coefficients: Vec<f64>, penalty: Penalty, sweeps: usize) -> Self {
        let coefficients: Vec<f64> = std_coefficients
            .iter()
            .zip(&standardization.scales)
            .map(|(b, s)| if *s > 0.0 { b / s } else { 0.0 })
            .collect();
        let intercept = std_intercept
            - coefficients
                .iter()
                .zip(&standardization.means)
                .map(|(c, m)| c * m)
                .sum::<f64>();
        LinearModel {
            intercept,
            coefficients,
            std_intercept,
            std_coefficients,
            standardization,
            penalty,
            sweeps,
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![self.std_intercept; x.nrows()];
        for (j, b) in self.std_coefficients.iter().enumerate() {
            let s = self.standardization.scales[j];
            if *b == 0.0 || s == 0.0 {
                continue;
            }
            let m = self.standardization.means[j];
            for (o, v) in out.iter_mut().zip(x.column(j).iter()) {
                *o += b * (v - m) / s;
            }
        }
        out
    }
}

/// Standardized design plus the sufficient statistics coordinate descent needs.
pub(crate) struct Prepared {
    pub std: Standardizer,
    pub xs: DMatrix<f64>,
    pub tbar: f64,
    /// `XsᵀXs / n`.
    pub gram: DMatrix<f64>,
    /// `Xsᵀ(t − t̄) / n`.
    pub corr: Vec<f64>,
    pub n: usize,
}

impl Prepared {
    pub fn new(x: &DMatrix<f64>, t: &[f64]) -> Self {
        let n = x.nrows();
        let std = Standardizer::fit(x);
        let xs = std.transform(x);
        let tbar = t.iter().sum::<f64>() / n as f64;
        let tc = DVector::from_iterator(n, t.iter().map(|v| v - tbar));
        let inv_n = 1.0 / n as f64;
        let gram = xs.tr_mul(&xs) * inv_n;
        let corr = (xs.tr_mul(&tc) * inv_n).iter().copied().collect();
        Prepared { std, xs, tbar, gram, corr, n }
    }

    pub fn active(&self) -> Vec<bool> {
        (0..self.xs.ncols()).map(|j| self.std.is_active(j)).collect()
    }
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Maximum KKT violation of the elastic-net problem at `beta`.
pub(crate) fn kkt_from_gram(gram: &DMatrix<f64>, corr: &[f64], beta: &[f64], active: &[bool], pen: Penalty) -> f64 {
    let p = beta.len();
    let mut worst: f64 = 0.0;
    for j in 0..p {
        if !active[j] {
            continue;
        }
        let gb: f64 = (0..p).map(|k| gram[(j, k)] * beta[k]).sum();
        let grad = gb - corr[j] + pen.lambda * (1.0 - pen.alpha) * beta[j];
        let l1 = pen.lambda * pen.alpha;
        let v = if beta[j] != 0.0 {
            (grad + l1 * beta[j].signum()).abs()
        } else {
            (grad.abs() - l1).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Cyclic coordinate descent with covariance updates; warm-starts from `beta`.
pub(crate) fn coordinate_descent(
    gram: &DMatrix<f64>,
    corr: &[f64],
    active: &[bool],
    pen: Penalty,
    beta: &mut [f64],
    tol: f64,
    max_sweeps: usize,
) -> Result<usize> {
    coordinate_descent_weighted(gram, corr, active, None, pen, beta, tol, max_sweeps)
}

/// As [`coordinate_descent`], with per-coordinate penalty factors
/// (`0` leaves a coordinate unpenalized).
#[allow(clippy::too_many_arguments)]
pub(crate) fn coordinate_descent_weighted(
    gram: &DMatrix<f64>,
    corr: &[f64],
    active: &[bool],
    factors: Option<&[f64]>,
    pen: Penalty,
    beta: &mut [f64],
    tol: f64,
    max_sweeps: usize,
) -> Result<usize> {
    let p = beta.len();
    let mut q: Vec<f64> = (0..p).map(|j| (0..p).map(|k| gram[(j, k)] * beta[k]).sum()).collect();
    for sweep in 1..=max_sweeps {
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if !active[j] {
                continue;
            }
            let f = factors.map_or(1.0, |f| f[j]);
            let l1 = pen.lambda * pen.alpha * f;
            let l2 = pen.lambda * (1.0 - pen.alpha) * f;
            let gjj = gram[(j, j)];
            if gjj + l2 <= 0.0 {
                continue;
            }
            let z = corr[j] - q[j] + gjj * beta[j];
            let new = soft_threshold(z, l1) / (gjj + l2);
            let delta = new - beta[j];
            if delta != 0.0 {
                let col = gram.column(j);
                for (qk, g) in q.iter_mut().zip(col.iter()) {
                    *qk += g * delta;
                }
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < tol {
            return Ok(sweep);
        }
    }
    Err(Error::Convergence {
        sweeps: max_sweeps,
        kkt_residual: kkt_from_gram(gram, corr, beta, active, pen),
    })
}

pub(crate) fn check_shape(x: &DMatrix<f64>, t: &[f64]) -> Result<()> {
    if x.nrows() != t.len() {
        return Err(Error::Validation(format!("{} feature rows but {} targets", x.nrows(), t.len())));
    }
    if t.len() < 2 {
        return Err(Error::Validation("need at least two rows to fit a learner".into()));
    }
    Ok(())
}

/// Ridge regression by a direct solve of `(XsᵀXs + λI) β = Xsᵀ(t − t̄)` on
/// standardized features; the intercept is not penalized.
///
/// Minimizes `Σ(tᵢ − ŷᵢ)² + λ‖β‖²`.
pub fn fit_ridge(x: &DMatrix<f64>, t: &[f64], lambda: f64) -> Result<LinearModel> {
    check_shape(x, t)?;
    if !(lambda >= 0.0) {
        return Err(Error::Validation(format!("ridge penalty must be nonnegative, got {lambda}")));
    }
    let prep = Prepared::new(x, t);
    fit_ridge_prepared(&prep, lambda)
}

pub(crate) fn fit_ridge_prepared(prep: &Prepared, lambda: f64) -> Result<LinearModel> {
    let p = prep.xs.ncols();
    let active: Vec<usize> = (0..p).filter(|&j| prep.std.is_active(j)).collect();
    let mut beta = vec![0.0; p];
    if !active.is_empty() {
        let n = prep.n as f64;
        let k = active.len();
        let mut a = DMatrix::from_fn(k, k, |r, c| prep.gram[(active[r], active[c])] * n);
        for r in 0..k {
            a[(r, r)] += lambda;
        }
        let b = DVector::from_iterator(k, active.iter().map(|&j| prep.corr[j] * n));
        let chol = a.clone().cholesky().ok_or_else(|| {
            Error::Numerical("ridge system is singular (collinear features); use lambda > 0".into())
        })?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        if (lo / hi).powi(2) < 1e-12 {
            return Err(Error::Numerical(
                "ridge system is numerically singular (collinear features); use lambda > 0".into(),
            ));
        }
        let sol = chol.solve(&b);
        for (r, &j) in active.iter().enumerate() {
            beta[j] = sol[r];
        }
    }
    Ok(LinearModel::from_std(
        prep.std.clone(),
        prep.tbar,
        beta,
        Penalty { lambda, alpha: 0.0 },
        0,
    ))
}

/// Elastic net by cyclic coordinate descent with soft-thresholding.
///
/// Minimizes `(1/2n)Σ(tᵢ − ŷᵢ)² + λ(α‖β‖₁ + (1−α)/2 ‖β‖²)` over standardized
/// features until the largest coefficient change falls below `tol`.
pub fn fit_elastic_net(x: &DMatrix<f64>, t: &[f64], lambda: f64, alpha: f64, tol: f64, max_sweeps: usize) -> Result<LinearModel> {
    check_shape(x, t)?;
    if !(lambda >= 0.0) || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("invalid penalty lambda={lambda}, alpha={alpha}")));
    }
    let prep = Prepared::new(x, t);
    let mut beta = vec![0.0; x.ncols()];
    fit_elastic_net_prepared(&prep, Penalty { lambda, alpha }, &mut beta, tol, max_sweeps)
}

pub(crate) fn fit_elastic_net_prepared(prep: &Prepared, pen: Penalty, beta: &mut [f64], tol: f64, max_sweeps: usize) -> Result<LinearModel> {
    let active = prep.active();
    let sweeps = coordinate_descent(&prep.gram, &prep.corr, &active, pen, beta, tol, max_sweeps)?;
    Ok(LinearModel::from_std(prep.std.clone(), prep.tbar, beta.to_vec(), pen, sweeps))
}

/// Largest KKT violation of `model` on `(x, t)` for its own penalty.
pub fn kkt_residual(model: &LinearModel, x: &DMatrix<f64>, t: &[f64]) -> f64 {
    let prep = Prepared::new(x, t);
    kkt_from_gram(&prep.gram, &prep.corr, &model.std_coefficients, &prep.active(), model.penalty)
}

/// Elastic-net objective of `model` on `(x, t)`.
pub fn elastic_net_objective(model: &LinearModel, x: &DMatrix<f64>, t: &[f64]) -> f64 {
    let pred = model.predict(x);
    let n = t.len() as f64;
    let rss: f64 = t.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum();
    let b = &model.std_coefficients;
    let Penalty { lambda, alpha } = model.penalty;
    rss / (2.0 * n)
        + lambda * (alpha * b.iter().map(|v| v.abs()).sum::<f64>() + 0.5 * (1.0 - alpha) * b.iter().map(|v| v * v).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let t = (0..n)
            .map(|i| 1.0 + 2.0 * x[(i, 0)] - x[(i, 1 % p)] + 0.3 * (rng.random::<f64>() - 0.5))
            .collect();
        (x, t)
    }

    #[test]
    fn ridge_interpolates_two_points() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let m = fit_ridge(&x, &[0.0, 1.0], 0.0).unwrap();
        let p = m.predict(&x);
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
        assert!((m.coefficients[0] - 1.0).abs() < 1e-12);
        assert!(m.intercept.abs() < 1e-12);
    }

    #[test]
    fn ridge_full_shrinkage() {
        let (x, t) = random_problem(20, 3, 1);
        let m = fit_ridge(&x, &t, 1e12).unwrap();
        let mean = t.iter().sum::<f64>() / 20.0;
        assert!(m.std_coefficients.iter().all(|b| b.abs() < 1e-9));
        assert!((m.std_intercept - mean).abs() < 1e-12);
    }

    /// Dense normal equations on `[1, Xs]` with an unpenalized intercept.
    fn normal_equations_oracle(x: &DMatrix<f64>, t: &[f64], lambda: f64) -> Vec<f64> {
        let std = Standardizer::fit(x);
        let xs = std.transform(x);
        let (n, p) = xs.shape();
        let a = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { xs[(i, j - 1)] });
        let mut lhs = a.transpose() * &a;
        for j in 1..=p {
            lhs[(j, j)] += lambda;
        }
        let rhs = a.transpose() * DVector::from_column_slice(t);
        let coef = lhs.lu().solve(&rhs).unwrap();
        (a * coef).iter().copied().collect()
    }

    #[test]
    fn ridge_matches_normal_equations() {
        let (x, t) = random_problem(20, 3, 2);
        for lambda in [0.0, 0.5, 10.0] {
            let fitted = fit_ridge(&x, &t, lambda).unwrap().predict(&x);
            let oracle = normal_equations_oracle(&x, &t, lambda);
            for (a, b) in fitted.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8, "lambda {lambda}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ridge_collinear_without_penalty_fails() {
        let x = DMatrix::from_fn(10, 2, |i, j| i as f64 * (j + 1) as f64);
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(matches!(fit_ridge(&x, &t, 0.0), Err(Error::Numerical(_))));
        assert!(fit_ridge(&x, &t, 1.0).is_ok());
    }

    #[test]
    fn elastic_net_without_penalty_matches_ols() {
        let (x, t) = random_problem(20, 3, 3);
        let ols = fit_ridge(&x, &t, 0.0).unwrap().predict(&x);
        for alpha in [0.0, 0.5, 1.0] {
            let en = fit_elastic_net(&x, &t, 0.0, alpha, 1e-10, 100_000).unwrap().predict(&x);
            for (a, b) in en.iter().zip(&ols) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lasso_null_threshold_zeroes_everything() {
        let (x, t) = random_problem(20, 3, 4);
        let prep = Prepared::new(&x, &t);
        let lmax = prep.corr.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let m = fit_elastic_net(&x, &t, lmax, 1.0, 1e-7, 10_000).unwrap();
        assert!(m.std_coefficients.iter().all(|b| *b == 0.0));
        let m = fit_elastic_net(&x, &t, 0.9 * lmax, 1.0, 1e-7, 10_000).unwrap();
        assert!(m.std_coefficients.iter().any(|b| *b != 0.0));
    }

    #[test]
    fn lasso_matches_grid_search() {
        let (x, t) = random_problem(20, 2, 5);
        let lambda = 0.2;
        let m = fit_elastic_net(&x, &t, lambda, 1.0, 1e-12, 100_000).unwrap();
        let got = elastic_net_objective(&m, &x, &t);

        // Oracle: brute-force the standardized coefficient plane, refine around the best cell.
        let std = Standardizer::fit(&x);
        let xs = std.transform(&x);
        let tbar = t.iter().sum::<f64>() / t.len() as f64;
        let obj = |b0: f64, b1: f64| {
            let rss: f64 = (0..t.len())
                .map(|i| (t[i] - tbar - b0 * xs[(i, 0)] - b1 * xs[(i, 1)]).powi(2))
                .sum();
            rss / (2.0 * t.len() as f64) + lambda * (b0.abs() + b1.abs())
        };
        let (mut c0, mut c1, mut width) = (0.0, 0.0, 4.0);
        let mut best = obj(c0, c1);
        for _ in 0..30 {
            let steps = 40;
            let (mut b0b, mut b1b) = (c0, c1);
            for a in 0..=steps {
                for b in 0..=steps {
                    let b0 = c0 - width + 2.0 * width * a as f64 / steps as f64;
                    let b1 = c1 - width + 2.0 * width * b as f64 / steps as f64;
                    let v = obj(b0, b1);
                    if v < best {
                        best = v;
                        b0b = b0;
                        b1b = b1;
                    }
                }
            }
            c0 = b0b;
            c1 = b1b;
            width *= 0.25;
        }
        assert!((got - best).abs() < 1e-6, "cd {got} vs grid {best}");
        assert!(got <= best + 1e-9);
    }

    #[test]
    fn lasso_kkt_holds() {
        let (x, t) = random_problem(40, 5, 6);
        for lambda in [0.01, 0.1, 0.5] {
            for alpha in [0.3, 1.0] {
                let m = fit_elastic_net(&x, &t, lambda, alpha, 1e-7, 10_000).unwrap();
                assert!(kkt_residual(&m, &x, &t) <= 2e-7, "kkt {}", kkt_residual(&m, &x, &t));
            }
        }
    }

    #[test]
    fn non_convergence_reports_kkt() {
        let (x, t) = random_problem(20, 3, 7);
        match fit_elastic_net(&x, &t, 1e-4, 1.0, 1e-30, 2) {
            Err(Error::Convergence { sweeps, kkt_residual }) => {
                assert_eq!(sweeps, 2);
                assert!(kkt_residual.is_finite());
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }
}
