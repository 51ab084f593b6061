//! Gaussian kernels of order 2, 4 and 6, product kernels, local-constant
//! regression, kernel density estimation and leave-one-out bandwidth choice.
//!
//! Functions here work on whatever coordinates they are given. The GATE and
//! ATE estimators standardize the moderators first (see [`ZScaler`]) so that
//! one shared bandwidth is meaningful across dimensions.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Kernel sums below `DENSITY_FLOOR · N` count as "no local data".
pub const DENSITY_FLOOR: f64 = 1e-10;

/// Pairs with `u²/2` above this are dropped from the LOOCV sums
/// (`e^{-40} ≈ 4e-18`).
const LOOCV_CUTOFF: f64 = 40.0;

/// Symmetric Gaussian-based kernel of even order 2, 4 or 6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub order: u32,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { order: 2 }
    }
}

impl KernelSpec {
    pub fn new(order: u32) -> Result<Self> {
        let k = KernelSpec { order };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.order, 2 | 4 | 6) {
            Ok(())
        } else {
            Err(Error::Validation(format!("kernel order must be 2, 4 or 6, got {}", self.order)))
        }
    }

    /// Polynomial factor multiplying φ(u), as a function of u².
    #[inline]
    fn poly(&self, u2: f64) -> f64 {
        match self.order {
            2 => 1.0,
            4 => 0.5 * (3.0 - u2),
            _ => 0.125 * (15.0 - 10.0 * u2 + u2 * u2),
        }
    }

    pub fn eval(&self, u: f64) -> f64 {
        let u2 = u * u;
        self.poly(u2) * (-0.5 * u2).exp() / (2.0 * PI).sqrt()
    }

    /// `∫K(u)²du` in one dimension.
    pub fn roughness(&self) -> f64 {
        let base = 1.0 / (2.0 * PI.sqrt());
        match self.order {
            2 => base,
            4 => base * 27.0 / 16.0,
            _ => base * 2265.0 / 1024.0,
        }
    }

    /// `∫K(u)²du` for the product kernel in `dim` dimensions.
    pub fn product_roughness(&self, dim: usize) -> f64 {
        self.roughness().powi(dim as i32)
    }

    /// Product kernel at the already-scaled difference vector `u`.
    #[inline]
    fn product_scaled(&self, u: impl Iterator<Item = f64>) -> f64 {
        let mut sq = 0.0;
        let mut poly = 1.0;
        let mut dim = 0;
        for v in u {
            let v2 = v * v;
            sq += v2;
            poly *= self.poly(v2);
            dim += 1;
        }
        poly * (-0.5 * sq).exp() / (2.0 * PI).powf(0.5 * dim as f64)
    }
}

pub fn kernel_eval(spec: KernelSpec, u: f64) -> f64 {
    spec.eval(u)
}

/// `∏ₖ K((zᵢₖ − zₖ)/h)`.
pub fn product_kernel(spec: KernelSpec, zi: &[f64], z: &[f64], h: f64) -> f64 {
    assert_eq!(zi.len(), z.len(), "dimension mismatch");
    spec.product_scaled(zi.iter().zip(z).map(|(a, b)| (a - b) / h))
}

/// Kernel values `K((zᵢ − query)/h)` for every row. An infinite `h` gives the
/// flat kernel (all ones).
pub fn kernel_weights(z: &DMatrix<f64>, query: &[f64], h: f64, spec: KernelSpec) -> Vec<f64> {
    if h.is_infinite() {
        return vec![1.0; z.nrows()];
    }
    (0..z.nrows())
        .map(|i| spec.product_scaled((0..z.ncols()).map(|k| (z[(i, k)] - query[k]) / h)))
        .collect()
}

/// Local-constant fit at one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct NwFit {
    pub estimate: f64,
    /// Normalized weights, summing to one.
    pub weights: Vec<f64>,
    /// `ΣKᵢ`.
    pub mass: f64,
    /// Density estimate `ΣKᵢ / (N h^λ)`.
    pub f_hat: f64,
}

fn check_query(z: &DMatrix<f64>, query: &[f64], h: f64) -> Result<()> {
    if query.len() != z.ncols() {
        return Err(Error::Validation(format!(
            "query has {} coordinates but there are {} moderators",
            query.len(),
            z.ncols()
        )));
    }
    if !(h > 0.0) {
        return Err(Error::Validation(format!("bandwidth must be positive, got {h}")));
    }
    Ok(())
}

/// Nadaraya–Watson estimate `ΣKᵢψᵢ / ΣKᵢ` at `query`.
pub fn nw_regress(psi: &[f64], z: &DMatrix<f64>, query: &[f64], h: f64, spec: KernelSpec) -> Result<NwFit> {
    check_query(z, query, h)?;
    let n = psi.len();
    let k = kernel_weights(z, query, h, spec);
    let mass: f64 = k.iter().sum();
    if !(mass >= DENSITY_FLOOR * n as f64) {
        return Err(Error::NoLocalData { query: query.to_vec(), mass });
    }
    let num: f64 = k.iter().zip(psi).map(|(a, b)| a * b).sum();
    Ok(NwFit {
        estimate: num / mass,
        weights: k.iter().map(|v| v / mass).collect(),
        mass,
        f_hat: mass / (n as f64 * h.powi(z.ncols() as i32)),
    })
}

/// Kernel density estimate `ΣKᵢ / (N h^λ)`.
pub fn kde(z: &DMatrix<f64>, query: &[f64], h: f64, spec: KernelSpec) -> f64 {
    let mass: f64 = kernel_weights(z, query, h, spec).iter().sum();
    mass / (z.nrows() as f64 * h.powi(z.ncols() as i32))
}

/// Per-column centring and scaling of the moderators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScaler {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl ZScaler {
    /// Sample mean and SD per column; a constant column is an error.
    pub fn fit(z: &DMatrix<f64>, names: &[String]) -> Result<Self> {
        let mut means = Vec::new();
        let mut sds = Vec::new();
        for (k, col) in z.column_iter().enumerate() {
            let v: Vec<f64> = col.iter().copied().collect();
            let sd = stats::sd(&v);
            if !(sd > 0.0) {
                let name = names.get(k).map_or("?", String::as_str);
                return Err(Error::Validation(format!("moderator '{name}' has zero variance")));
            }
            means.push(stats::mean(&v));
            sds.push(sd);
        }
        Ok(ZScaler { means, sds })
    }

    pub fn transform(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, k| (z[(i, k)] - self.means[k]) / self.sds[k])
    }

    pub fn transform_point(&self, q: &[f64]) -> Vec<f64> {
        q.iter().enumerate().map(|(k, v)| (v - self.means[k]) / self.sds[k]).collect()
    }
}

/// Rule-of-thumb bandwidth shared across dimensions.
///
/// One dimension: `0.9 · min(sd, IQR/1.34) · N^{-1/5}`. With `λ > 1`
/// dimensions the normal-reference constant `(4/(λ+2))^{1/(λ+4)} · N^{-1/(λ+4)}`
/// times the average spread.
pub fn silverman(z: &DMatrix<f64>) -> f64 {
    let n = z.nrows() as f64;
    let lambda = z.ncols() as f64;
    let spread: f64 = z
        .column_iter()
        .map(|col| {
            let v: Vec<f64> = col.iter().copied().collect();
            let s = stats::sorted(&v);
            let iqr = stats::quantile_sorted(&s, 0.75) - stats::quantile_sorted(&s, 0.25);
            let sd = stats::sd(&v);
            if iqr > 0.0 {
                sd.min(iqr / 1.34)
            } else {
                sd
            }
        })
        .sum::<f64>()
        / lambda;
    if z.ncols() == 1 {
        0.9 * spread * n.powf(-0.2)
    } else {
        (4.0 / (lambda + 2.0)).powf(1.0 / (lambda + 4.0)) * n.powf(-1.0 / (lambda + 4.0)) * spread
    }
}

/// `points` log-spaced bandwidths over `[0.05, 2] · silverman(z)`, ascending.
pub fn default_grid(z: &DMatrix<f64>, points: usize) -> Vec<f64> {
    let h0 = silverman(z);
    let (lo, hi) = ((0.05 * h0).ln(), (2.0 * h0).ln());
    if points <= 1 {
        return vec![h0];
    }
    (0..points).map(|k| (lo + (hi - lo) * k as f64 / (points - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthSource {
    Loocv,
    Manual,
    /// Infinite bandwidth: every observation gets the same weight.
    Flat,
}

/// Chosen bandwidth, in the coordinates the kernel was applied in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bandwidth {
    pub h: f64,
    /// Value before the undersmoothing factor.
    pub raw: f64,
    pub undersmooth_factor: f64,
    pub source: BandwidthSource,
    pub cv: Option<CvTrace>,
}

impl Bandwidth {
    pub fn manual(h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::Validation(format!("bandwidth must be positive, got {h}")));
        }
        Ok(Bandwidth { h, raw: h, undersmooth_factor: 1.0, source: BandwidthSource::Manual, cv: None })
    }

    pub fn flat() -> Self {
        Bandwidth { h: f64::INFINITY, raw: f64::INFINITY, undersmooth_factor: 1.0, source: BandwidthSource::Flat, cv: None }
    }

    /// Same selection with another multiplier on the raw value.
    pub fn rescaled(&self, factor: f64) -> Self {
        Bandwidth { h: self.raw * factor, undersmooth_factor: factor, ..self.clone() }
    }
}

/// Leave-one-out criterion over the bandwidth grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvTrace {
    pub grid: Vec<f64>,
    /// `Σᵢ (ψᵢ − τ̂₋ᵢ(zᵢ))²`; NaN where every row was below the floor.
    pub criterion: Vec<f64>,
    /// Rows that fell back to the leave-one-out mean, per grid value.
    pub floor_rows: Vec<usize>,
}

/// Kernel value for the pair at squared coordinate differences `diffs`
/// (summing to `d2`) under `inv_h2 = 1/h²`, or `None` beyond the cutoff.
#[inline]
fn pair_kernel(d2: f64, diffs: &[f64], s: f64, spec: KernelSpec, norm: f64) -> Option<f64> {
    let a = 0.5 * d2 * s;
    if a > LOOCV_CUTOFF {
        return None;
    }
    let mut kv = (-a).exp() * norm;
    if spec.order != 2 {
        for &dk in diffs {
            kv *= spec.poly(dk * s);
        }
    }
    Some(kv)
}

/// Squared differences between rows `i` and `j` of the row-major `zs`.
#[inline]
fn sq_diffs(zs: &[f64], dim: usize, i: usize, j: usize, diffs: &mut [f64]) -> f64 {
    let mut d2 = 0.0;
    for k in 0..dim {
        let d = zs[i * dim + k] - zs[j * dim + k];
        diffs[k] = d * d;
        d2 += diffs[k];
    }
    d2
}

/// Leave-one-out kernel sums `Σ_{j≠i} K` and `Σ_{j≠i} Kψⱼ` in sorted-index
/// space, laid out as `[i · G + g]`. `zs` is row-major and sorted by its first
/// coordinate; `inv_h2` is ascending (largest bandwidth first).
///
/// Every row accumulates its terms in ascending `j` under the same cutoff
/// rule, so the serial pair loop and the parallel per-row loop give
/// bit-identical sums.
fn loo_sums(zs: &[f64], dim: usize, psi: &[f64], inv_h2: &[f64], spec: KernelSpec, norm: f64) -> (Vec<f64>, Vec<f64>) {
    let n = psi.len();
    let g_len = inv_h2.len();
    let s_min = inv_h2[0];
    // In one dimension rows farther apart than this never contribute.
    let window2 = 2.0 * LOOCV_CUTOFF / s_min;
    if rayon::current_num_threads() <= 1 {
        let mut den = vec![0.0; n * g_len];
        let mut num = vec![0.0; n * g_len];
        let mut diffs = vec![0.0; dim];
        for i in 0..n {
            for j in i + 1..n {
                let d2 = sq_diffs(zs, dim, i, j, &mut diffs);
                if dim == 1 && d2 > window2 {
                    break;
                }
                for g in 0..g_len {
                    let Some(kv) = pair_kernel(d2, &diffs, inv_h2[g], spec, norm) else { break };
                    den[i * g_len + g] += kv;
                    num[i * g_len + g] += kv * psi[j];
                    den[j * g_len + g] += kv;
                    num[j * g_len + g] += kv * psi[i];
                }
            }
        }
        return (den, num);
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut den = vec![0.0; g_len];
            let mut num = vec![0.0; g_len];
            let mut diffs = vec![0.0; dim];
            let mut lo = 0;
            if dim == 1 {
                lo = i;
                while lo > 0 && (zs[i] - zs[lo - 1]).powi(2) <= window2 {
                    lo -= 1;
                }
            }
            for j in lo..n {
                if j == i {
                    continue;
                }
                let d2 = sq_diffs(zs, dim, i, j, &mut diffs);
                if dim == 1 && d2 > window2 {
                    if j > i {
                        break;
                    }
                    continue;
                }
                for g in 0..g_len {
                    let Some(kv) = pair_kernel(d2, &diffs, inv_h2[g], spec, norm) else { break };
                    den[g] += kv;
                    num[g] += kv * psi[j];
                }
            }
            (den, num)
        })
        .collect();
    let mut den = Vec::with_capacity(n * g_len);
    let mut num = Vec::with_capacity(n * g_len);
    for (d, m) in rows {
        den.extend(d);
        num.extend(m);
    }
    (den, num)
}

/// Leave-one-out CV criterion for each bandwidth in `grid`.
pub fn loocv_criterion(psi: &[f64], z: &DMatrix<f64>, spec: KernelSpec, grid: &[f64]) -> Result<CvTrace> {
    let n = psi.len();
    if n < 3 {
        return Err(Error::BandwidthSelection("leave-one-out selection needs at least 3 rows".into()));
    }
    if grid.is_empty() || grid.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
        return Err(Error::BandwidthSelection("bandwidth grid must be non-empty, finite and positive".into()));
    }
    let dim = z.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[(a, 0)].total_cmp(&z[(b, 0)]).then(a.cmp(&b)));
    let zs: Vec<f64> = order.iter().flat_map(|&i| (0..dim).map(move |k| z[(i, k)])).collect();
    let psi_s: Vec<f64> = order.iter().map(|&i| psi[i]).collect();
    let mut g_order: Vec<usize> = (0..grid.len()).collect();
    g_order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let inv_h2: Vec<f64> = g_order.iter().map(|&g| 1.0 / (grid[g] * grid[g])).collect();
    let norm = (2.0 * PI).powf(-0.5 * dim as f64);
    let g_len = grid.len();
    let (den_all, num_all) = loo_sums(&zs, dim, &psi_s, &inv_h2, spec, norm);

    let total: f64 = psi_s.iter().sum();
    let floor = DENSITY_FLOOR * n as f64;
    let mut criterion = vec![f64::NAN; g_len];
    let mut floor_rows = vec![0; g_len];
    for (gi, &g) in g_order.iter().enumerate() {
        let mut sse = 0.0;
        let mut fallbacks = 0;
        for i in 0..n {
            let den = den_all[i * g_len + gi];
            let pred = if den >= floor {
                num_all[i * g_len + gi] / den
            } else {
                fallbacks += 1;
                (total - psi_s[i]) / (n - 1) as f64
            };
            sse += (psi_s[i] - pred).powi(2);
        }
        floor_rows[g] = fallbacks;
        if fallbacks < n && sse.is_finite() {
            criterion[g] = sse;
        }
    }
    Ok(CvTrace { grid: grid.to_vec(), criterion, floor_rows })
}

/// Minimizes the leave-one-out criterion over `grid` and multiplies the
/// minimizer by `undersmooth_factor`. Ties go to the larger bandwidth.
pub fn loocv_bandwidth(
    psi: &[f64],
    z: &DMatrix<f64>,
    spec: KernelSpec,
    grid: &[f64],
    undersmooth_factor: f64,
) -> Result<Bandwidth> {
    if !(undersmooth_factor > 0.0) {
        return Err(Error::Validation(format!("undersmooth factor must be positive, got {undersmooth_factor}")));
    }
    let trace = loocv_criterion(psi, z, spec, grid)?;
    let mut best: Option<usize> = None;
    for g in 0..grid.len() {
        let c = trace.criterion[g];
        if c.is_nan() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => c < trace.criterion[b] || (c == trace.criterion[b] && grid[g] > grid[b]),
        };
        if better {
            best = Some(g);
        }
    }
    let b = best.ok_or_else(|| {
        Error::BandwidthSelection("every grid bandwidth leaves all rows below the density floor".into())
    })?;
    let raw = grid[b];
    Ok(Bandwidth { h: raw * undersmooth_factor, raw, undersmooth_factor, source: BandwidthSource::Loocv, cv: Some(trace) })
}
