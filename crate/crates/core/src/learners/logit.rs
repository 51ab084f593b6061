use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linear::{check_shape, coordinate_descent_weighted, Penalty};
use super::Standardizer;
use crate::error::{Error, Result};

/// Linear predictor is clamped to this magnitude so probabilities stay
/// strictly inside (0, 1).
const ETA_CLAMP: f64 = 30.0;

/// Logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub std_intercept: f64,
    pub std_coefficients: Vec<f64>,
    pub standardization: Standardizer,
    pub penalty: Option<Penalty>,
    pub iterations: usize,
}

pub(crate) fn sigmoid(eta: f64) -> f64 {
    let e = eta.clamp(-ETA_CLAMP, ETA_CLAMP);
    1.0 / (1.0 + (-e).exp())
}

impl LogitModel {
    fn from_std(std: Standardizer, b0: f64, beta: Vec<f64>, penalty: Option<Penalty>, iterations: usize) -> Self {
        let coefficients: Vec<f64> = beta
            .iter()
            .zip(&std.scales)
            .map(|(b, s)| if *s > 0.0 { b / s } else { 0.0 })
            .collect();
        let intercept = b0 - coefficients.iter().zip(&std.means).map(|(c, m)| c * m).sum::<f64>();
        LogitModel {
            intercept,
            coefficients,
            std_intercept: b0,
            std_coefficients: beta,
            standardization: std,
            penalty,
            iterations,
        }
    }

    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut eta = vec![self.std_intercept; x.nrows()];
        for (j, b) in self.std_coefficients.iter().enumerate() {
            let s = self.standardization.scales[j];
            if *b == 0.0 || s == 0.0 {
                continue;
            }
            let m = self.standardization.means[j];
            for (e, v) in eta.iter_mut().zip(x.column(j).iter()) {
                *e += b * (v - m) / s;
            }
        }
        eta
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.linear_predictor(x).into_iter().map(sigmoid).collect()
    }
}

fn check_labels(labels: &[f64]) -> Result<f64> {
    if labels.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("logistic labels must be 0 or 1".into()));
    }
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    if mean == 0.0 || mean == 1.0 {
        return Err(Error::Validation("logistic regression needs both classes".into()));
    }
    Ok(mean)
}

fn log_likelihood(eta: &[f64], y: &[f64]) -> f64 {
    eta.iter()
        .zip(y)
        .map(|(&e, &y)| {
            // log(1 + exp(e)) computed stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            y * e - softplus
        })
        .sum()
}

/// `[1, Xs]` restricted to active columns, plus the column map.
fn design(xs: &DMatrix<f64>, std: &Standardizer) -> (DMatrix<f64>, Vec<usize>) {
    let active: Vec<usize> = (0..xs.ncols()).filter(|&j| std.is_active(j)).collect();
    let a = DMatrix::from_fn(xs.nrows(), active.len() + 1, |i, c| if c == 0 { 1.0 } else { xs[(i, active[c - 1])] });
    (a, active)
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares with step halving; stops when the log-likelihood changes by less
/// than `tol`.
pub fn fit_logit(x: &DMatrix<f64>, labels: &[f64], tol: f64, max_iter: usize) -> Result<LogitModel> {
    check_shape(x, labels)?;
    let mean = check_labels(labels)?;
    let n = labels.len();
    let std = Standardizer::fit(x);
    let xs = std.transform(x);
    let (a, active) = design(&xs, &std);
    let k = a.ncols();
    let mut coef = DVector::zeros(k);
    coef[0] = (mean / (1.0 - mean)).ln();
    let mut eta: Vec<f64> = (&a * &coef).iter().copied().collect();
    let mut ll = log_likelihood(&eta, labels);
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > max_iter {
            let grad_norm = gradient_norm(&a, &eta, labels);
            return Err(Error::Convergence { sweeps: max_iter, kkt_residual: grad_norm });
        }
        let p: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let resid = DVector::from_iterator(n, labels.iter().zip(&p).map(|(y, p)| y - p));
        let grad = a.tr_mul(&resid);
        let mut aw = a.clone();
        for (i, mut row) in aw.row_iter_mut().enumerate() {
            row *= (p[i] * (1.0 - p[i])).max(1e-12);
        }
        let hess = a.tr_mul(&aw);
        let step = hess
            .cholesky()
            .map(|c| c.solve(&grad))
            .ok_or_else(|| Error::Numerical("singular information matrix in logistic regression".into()))?;
        let mut scale = 1.0;
        let (new_coef, new_eta, new_ll) = loop {
            let c = &coef + &step * scale;
            let e: Vec<f64> = (&a * &c).iter().copied().collect();
            let l = log_likelihood(&e, labels);
            if l >= ll - 1e-12 || scale < 1e-10 {
                break (c, e, l);
            }
            scale *= 0.5;
        };
        let change = (new_ll - ll).abs();
        coef = new_coef;
        eta = new_eta;
        ll = new_ll;
        // Coefficients this large on standardized features only arise when the
        // likelihood has no finite maximizer.
        let max_coef = coef.iter().skip(1).fold(0.0f64, |m, b| m.max(b.abs()));
        if ll / (n as f64) > -1e-4 || max_coef > 50.0 {
            return Err(Error::Separation);
        }
        if change < tol {
            break;
        }
    }
    let mut beta = vec![0.0; x.ncols()];
    for (c, &j) in active.iter().enumerate() {
        beta[j] = coef[c + 1];
    }
    Ok(LogitModel::from_std(std, coef[0], beta, None, iterations))
}

fn gradient_norm(a: &DMatrix<f64>, eta: &[f64], y: &[f64]) -> f64 {
    let resid = DVector::from_iterator(y.len(), y.iter().zip(eta).map(|(y, e)| y - sigmoid(*e)));
    a.tr_mul(&resid).norm()
}

/// Penalized logistic regression by proximal Newton steps: each outer step
/// forms the IRLS working response and solves the weighted elastic-net
/// subproblem by coordinate descent. The intercept is unpenalized.
///
/// Minimizes `−(1/n)·loglik + λ(α‖β‖₁ + (1−α)/2 ‖β‖²)`.
#[allow(clippy::too_many_arguments)]
pub fn fit_penalized_logit(
    x: &DMatrix<f64>,
    labels: &[f64],
    pen: Penalty,
    tol: f64,
    max_iter: usize,
    cd_tol: f64,
    cd_max_sweeps: usize,
    warm: Option<&LogitModel>,
) -> Result<LogitModel> {
    check_shape(x, labels)?;
    let mean = check_labels(labels)?;
    let std = Standardizer::fit(x);
    let xs = std.transform(x);
    fit_penalized_standardized(&xs, std, labels, mean, pen, tol, max_iter, cd_tol, cd_max_sweeps, warm)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_penalized_standardized(
    xs: &DMatrix<f64>,
    std: Standardizer,
    labels: &[f64],
    mean: f64,
    pen: Penalty,
    tol: f64,
    max_iter: usize,
    cd_tol: f64,
    cd_max_sweeps: usize,
    warm: Option<&LogitModel>,
) -> Result<LogitModel> {
    let n = labels.len();
    let p = xs.ncols();
    let inv_n = 1.0 / n as f64;
    // coordinate 0 is the intercept
    let mut beta = vec![0.0; p + 1];
    match warm {
        Some(w) => {
            beta[0] = w.std_intercept;
            beta[1..].copy_from_slice(&w.std_coefficients);
        }
        None => beta[0] = (mean / (1.0 - mean)).ln(),
    }
    let mut active = vec![true; p + 1];
    for j in 0..p {
        active[j + 1] = std.is_active(j);
    }
    let mut factors = vec![1.0; p + 1];
    factors[0] = 0.0;
    let objective = |eta: &[f64], beta: &[f64]| {
        let pen_term: f64 = beta[1..]
            .iter()
            .map(|b| pen.alpha * b.abs() + 0.5 * (1.0 - pen.alpha) * b * b)
            .sum();
        -log_likelihood(eta, labels) * inv_n + pen.lambda * pen_term
    };
    let linear = |beta: &[f64]| -> Vec<f64> {
        let mut eta = vec![beta[0]; n];
        for j in 0..p {
            if beta[j + 1] != 0.0 {
                for (e, v) in eta.iter_mut().zip(xs.column(j).iter()) {
                    *e += beta[j + 1] * v;
                }
            }
        }
        eta
    };
    let design = DMatrix::from_fn(n, p + 1, |i, c| if c == 0 { 1.0 } else { xs[(i, c - 1)] });
    let mut eta = linear(&beta);
    let mut obj = objective(&eta, &beta);
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let prob: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let w: Vec<f64> = prob.iter().map(|p| (p * (1.0 - p)).max(1e-5)).collect();
        let z: Vec<f64> = (0..n).map(|i| eta[i] + (labels[i] - prob[i]) / w[i]).collect();
        // Weighted Gram of [1, Xs] and weighted correlation with z.
        let mut aw = design.clone();
        for mut col in aw.column_iter_mut() {
            col.iter_mut().zip(&w).for_each(|(v, wi)| *v *= wi);
        }
        let gram = design.tr_mul(&aw) * inv_n;
        let corr: Vec<f64> = (aw.tr_mul(&DVector::from_column_slice(&z)) * inv_n).iter().copied().collect();
        let prev = beta.clone();
        coordinate_descent_weighted(&gram, &corr, &active, Some(&factors), pen, &mut beta, cd_tol, cd_max_sweeps)?;
        let mut new_eta = linear(&beta);
        let mut new_obj = objective(&new_eta, &beta);
        // Backtrack toward the previous iterate if the Newton step overshoots.
        let mut t = 1.0;
        while new_obj > obj + 1e-12 && t > 1e-6 {
            t *= 0.5;
            for j in 0..=p {
                beta[j] = prev[j] + t * (beta[j] - prev[j]);
            }
            new_eta = linear(&beta);
            new_obj = objective(&new_eta, &beta);
        }
        let change = (obj - new_obj).abs() * n as f64;
        eta = new_eta;
        obj = new_obj;
        if change < tol {
            break;
        }
    }
    let b0 = beta[0];
    beta.remove(0);
    Ok(LogitModel::from_std(std, b0, beta, Some(pen), iterations))
}
