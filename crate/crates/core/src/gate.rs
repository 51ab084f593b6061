//! GATE curve estimation with pointwise asymptotic confidence intervals.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{self, default_grid, loocv_bandwidth, Bandwidth, KernelSpec, ZScaler, DENSITY_FLOOR};
use crate::score::{ScoreVariant, ScoreVector};
use crate::stats;

/// How the bandwidth is chosen. Values are in units of moderator standard
/// deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    Loocv,
    Manual,
    /// Infinite bandwidth; the NW fit becomes the sample mean.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandwidthConfig {
    pub mode: BandwidthMode,
    pub value: Option<f64>,
    pub undersmooth_factor: f64,
    /// Explicit LOOCV grid; defaults to a log grid around the rule of thumb.
    pub grid: Option<Vec<f64>>,
    pub grid_points: usize,
}

impl Default for BandwidthConfig {
    fn default() -> Self {
        BandwidthConfig { mode: BandwidthMode::Loocv, value: None, undersmooth_factor: 0.9, grid: None, grid_points: 40 }
    }
}

impl BandwidthConfig {
    pub fn manual(h: f64) -> Self {
        BandwidthConfig { mode: BandwidthMode::Manual, value: Some(h), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.undersmooth_factor > 0.0 && self.undersmooth_factor <= 1.0) {
            return Err(Error::Validation(format!(
                "bandwidth.undersmooth_factor must lie in (0, 1], got {}",
                self.undersmooth_factor
            )));
        }
        match self.mode {
            BandwidthMode::Manual => match self.value {
                Some(v) if v > 0.0 && v.is_finite() => {}
                _ => return Err(Error::Validation("bandwidth.value must be a positive number in manual mode".into())),
            },
            BandwidthMode::Loocv => {
                if let Some(g) = &self.grid {
                    if g.is_empty() || g.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
                        return Err(Error::Validation("bandwidth.grid must hold positive finite values".into()));
                    }
                } else if self.grid_points == 0 {
                    return Err(Error::Validation("bandwidth.grid_points must be positive".into()));
                }
            }
            BandwidthMode::Flat => {}
        }
        Ok(())
    }
}

/// Moderators of `ds` standardized to mean 0 and SD 1.
#[derive(Debug, Clone)]
pub struct Moderators {
    pub names: Vec<String>,
    pub scaler: ZScaler,
    pub raw: DMatrix<f64>,
    pub standardized: DMatrix<f64>,
}

impl Moderators {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let raw = ds.z_matrix();
        let names = ds.z_names();
        let scaler = ZScaler::fit(&raw, &names)?;
        let standardized = scaler.transform(&raw);
        Ok(Moderators { names, scaler, raw, standardized })
    }

    pub fn dim(&self) -> usize {
        self.raw.ncols()
    }
}

/// Picks the bandwidth (standardized units) for scores `psi`.
pub fn select_bandwidth(psi: &[f64], z: &Moderators, spec: KernelSpec, cfg: &BandwidthConfig) -> Result<Bandwidth> {
    cfg.validate()?;
    match cfg.mode {
        BandwidthMode::Flat => Ok(Bandwidth::flat()),
        BandwidthMode::Manual => Bandwidth::manual(cfg.value.unwrap_or_default()),
        BandwidthMode::Loocv => {
            let grid = match &cfg.grid {
                Some(g) => g.clone(),
                None => default_grid(&z.standardized, cfg.grid_points),
            };
            loocv_bandwidth(psi, &z.standardized, spec, &grid, cfg.undersmooth_factor)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatePoint {
    pub query: Vec<f64>,
    /// NaN when the query has no local data.
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// `ΣKᵢ / K(0)^λ`: number of observations at full kernel weight.
    pub n_effective: f64,
    pub f_hat: f64,
    /// Query lies outside the 5%–95% marginal quantile box of the moderators.
    pub outside_core: bool,
    pub no_local_data: bool,
    /// Weighted local variance came out negative (possible with higher-order
    /// kernels) and was set to zero.
    pub variance_clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateCurve {
    pub moderators: Vec<String>,
    pub points: Vec<GatePoint>,
    /// Bandwidth in standardized moderator units.
    pub bandwidth: Bandwidth,
    /// The same bandwidth in each moderator's original units.
    pub bandwidth_original: Vec<f64>,
    pub kernel: KernelSpec,
    pub level: f64,
    pub score_variant: ScoreVariant,
    pub n: usize,
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("confidence level must lie in (0, 1), got {level}")))
    }
}

/// Per-column `[P5, P95]` bounds.
fn core_box(z: &DMatrix<f64>) -> Vec<(f64, f64)> {
    z.column_iter()
        .map(|c| {
            let s = stats::sorted(&c.iter().copied().collect::<Vec<_>>());
            (stats::quantile_sorted(&s, 0.05), stats::quantile_sorted(&s, 0.95))
        })
        .collect()
}

/// GATE estimates with pointwise normal confidence intervals at `queries`
/// (original moderator units).
///
/// Variance: `∫K² · Σwᵢ(ψᵢ − τ̂)² / f̂(z)`, standard error
/// `σ̂ / √(N h^λ)`, both evaluated with the estimation kernel and bandwidth.
pub fn estimate_gate(
    psi: &ScoreVector,
    z: &Moderators,
    queries: &[Vec<f64>],
    bandwidth: &Bandwidth,
    spec: KernelSpec,
    level: f64,
) -> Result<GateCurve> {
    spec.validate()?;
    check_level(level)?;
    let n = psi.n();
    if z.raw.nrows() != n {
        return Err(Error::Validation("score vector and moderators differ in length".into()));
    }
    let dim = z.dim();
    if let Some(q) = queries.iter().find(|q| q.len() != dim) {
        return Err(Error::Validation(format!("query {q:?} does not have {dim} coordinates")));
    }
    let crit = stats::normal_critical(level);
    let rough = spec.product_roughness(dim);
    let k0 = spec.eval(0.0).powi(dim as i32);
    let bounds = core_box(&z.raw);
    let h = bandwidth.h;
    let points = queries
        .par_iter()
        .map(|q| {
            let outside_core = q.iter().zip(&bounds).any(|(v, (lo, hi))| v < lo || v > hi);
            let qs = z.scaler.transform_point(q);
            let undefined = |mass: f64| GatePoint {
                query: q.clone(),
                estimate: f64::NAN,
                std_error: f64::NAN,
                ci_lower: f64::NAN,
                ci_upper: f64::NAN,
                n_effective: mass / k0,
                f_hat: 0.0,
                outside_core,
                no_local_data: true,
                variance_clamped: false,
            };
            let fit = match kernel::nw_regress(&psi.psi, &z.standardized, &qs, h, spec) {
                Ok(f) => f,
                Err(Error::NoLocalData { mass, .. }) => return Ok(undefined(mass)),
                Err(e) => return Err(e),
            };
            let tau = fit.estimate;
            let local: f64 = fit.weights.iter().zip(&psi.psi).map(|(w, p)| w * (p - tau).powi(2)).sum();
            let variance_clamped = local < 0.0;
            let se = (rough * local.max(0.0) / fit.mass).sqrt();
            Ok(GatePoint {
                query: q.clone(),
                estimate: tau,
                std_error: se,
                ci_lower: tau - crit * se,
                ci_upper: tau + crit * se,
                n_effective: fit.mass / k0,
                f_hat: fit.f_hat,
                outside_core,
                no_local_data: false,
                variance_clamped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GateCurve {
        moderators: z.names.clone(),
        points,
        bandwidth: bandwidth.clone(),
        bandwidth_original: z.scaler.sds.iter().map(|s| s * h).collect(),
        kernel: spec,
        level,
        score_variant: psi.variant,
        n,
    })
}

/// Equispaced queries over the 5%–95% quantile box of the moderators: a
/// tensor grid with `n_points` per axis for up to two moderators, otherwise
/// `n_points` observed moderator vectors inside the box.
pub fn default_query_grid(ds: &Dataset, n_points: usize) -> Result<Vec<Vec<f64>>> {
    if n_points < 2 {
        return Err(Error::Validation("query grid needs at least 2 points".into()));
    }
    let z = ds.z_matrix();
    // Zero-variance check with the moderator name in the message.
    ZScaler::fit(&z, &ds.z_names())?;
    let bounds = core_box(&z);
    let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
        (0..n_points).map(|k| lo + (hi - lo) * k as f64 / (n_points - 1) as f64).collect()
    };
    match z.ncols() {
        1 => Ok(axis(bounds[0]).into_iter().map(|v| vec![v]).collect()),
        2 => {
            let (a, b) = (axis(bounds[0]), axis(bounds[1]));
            Ok(a.iter().flat_map(|x| b.iter().map(move |y| vec![*x, *y])).collect())
        }
        _ => {
            let inside: Vec<usize> = (0..z.nrows())
                .filter(|&i| (0..z.ncols()).all(|k| z[(i, k)] >= bounds[k].0 && z[(i, k)] <= bounds[k].1))
                .collect();
            let pool: Vec<usize> = if inside.is_empty() { (0..z.nrows()).collect() } else { inside };
            let take = n_points.min(pool.len());
            Ok((0..take)
                .map(|k| {
                    let i = pool[k * pool.len() / take];
                    (0..z.ncols()).map(|c| z[(i, c)]).collect()
                })
                .collect())
        }
    }
}

impl GateCurve {
    /// Writes one row per query: moderator coordinates, estimate, standard
    /// error, interval, effective size, density and flags.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = self.moderators.clone();
        header.extend(
            ["estimate", "se", "ci_lower", "ci_upper", "n_effective", "f_hat", "outside_core", "no_local_data", "variance_clamped"]
                .map(String::from),
        );
        w.write_record(&header)?;
        for p in &self.points {
            let mut row: Vec<String> = p.query.iter().map(|v| format!("{v:?}")).collect();
            for v in [p.estimate, p.std_error, p.ci_lower, p.ci_upper, p.n_effective, p.f_hat] {
                row.push(format!("{v:?}"));
            }
            for f in [p.outside_core, p.no_local_data, p.variance_clamped] {
                row.push(f.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.estimate).collect()
    }
}

/// Checks that every kernel sum at the observations clears the density floor.
pub(crate) fn floor_violations(z: &DMatrix<f64>, h: f64, spec: KernelSpec) -> Vec<usize> {
    let n = z.nrows();
    (0..n)
        .into_par_iter()
        .filter(|&j| {
            let q: Vec<f64> = (0..z.ncols()).map(|k| z[(j, k)]).collect();
            let mass: f64 = kernel::kernel_weights(z, &q, h, spec).iter().sum();
            !(mass >= DENSITY_FLOOR * n as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(z: Vec<f64>, lambda_z: usize) -> Dataset {
        let n = z.len() / lambda_z;
        let x = DMatrix::from_row_slice(n, lambda_z, &z);
        let d = (0..n).map(|i| (i % 2) as u8).collect();
        let names = (0..lambda_z).map(|k| format!("z{k}")).collect();
        Dataset::new(vec![0.0; n], d, x, names, (0..lambda_z).collect()).unwrap()
    }

    fn scores(psi: Vec<f64>) -> ScoreVector {
        ScoreVector { psi, variant: ScoreVariant::Aipw, trim_c: 0.01 }
    }

    #[test]
    fn constant_scores_give_constant_curve_with_zero_se() {
        let ds = dataset((0..20).map(f64::from).collect(), 1);
        let z = Moderators::from_dataset(&ds).unwrap();
        let q = default_query_grid(&ds, 5).unwrap();
        let c = estimate_gate(&scores(vec![3.0; 20]), &z, &q, &Bandwidth::manual(0.5).unwrap(), KernelSpec::default(), 0.95).unwrap();
        for p in &c.points {
            assert!((p.estimate - 3.0).abs() < 1e-12);
            assert!(p.std_error.abs() < 1e-7);
            assert!(p.ci_lower <= p.estimate && p.estimate <= p.ci_upper);
        }
    }

    /// Independent direct-summation oracle on standardized moderators.
    fn oracle(psi: &[f64], z: &DMatrix<f64>, q: &[f64], h: f64, r: u32) -> f64 {
        let phi = |u: f64| (-(u * u) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let k1 = |u: f64| match r {
            2 => phi(u),
            4 => 0.5 * (3.0 - u * u) * phi(u),
            _ => 0.125 * (15.0 - 10.0 * u * u + u.powi(4)) * phi(u),
        };
        let n = z.nrows();
        let cols: Vec<Vec<f64>> = (0..z.ncols()).map(|k| (0..n).map(|i| z[(i, k)]).collect()).collect();
        let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
        let sds: Vec<f64> = cols
            .iter()
            .zip(&means)
            .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt())
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let mut k = 1.0;
            for c in 0..z.ncols() {
                k *= k1(((z[(i, c)] - means[c]) / sds[c] - (q[c] - means[c]) / sds[c]) / h);
            }
            num += k * psi[i];
            den += k;
        }
        num / den
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for inst in 0..10 {
            let dim = 1 + inst % 2;
            let n = 10 + inst * 4;
            let zv: Vec<f64> = (0..n * dim).map(|_| rng.random::<f64>() * 4.0).collect();
            let ds = dataset(zv, dim);
            let z = Moderators::from_dataset(&ds).unwrap();
            let psi: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let r = [2, 4, 6][inst % 3];
            let h = 0.4 + rng.random::<f64>();
            let q: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| rng.random::<f64>() * 4.0).collect()).collect();
            let c = estimate_gate(&scores(psi.clone()), &z, &q, &Bandwidth::manual(h).unwrap(), KernelSpec::new(r).unwrap(), 0.9).unwrap();
            for (p, qq) in c.points.iter().zip(&q) {
                let o = oracle(&psi, &z.raw, qq, h, r);
                assert!((p.estimate - o).abs() < 1e-10, "instance {inst}: {} vs {o}", p.estimate);
            }
        }
    }

    #[test]
    fn se_matches_closed_form() {
        let ds = dataset(vec![0.0, 1.0, 2.0, 3.0, 4.0], 1);
        let z = Moderators::from_dataset(&ds).unwrap();
        let psi = vec![1.0, -1.0, 2.0, 0.5, 3.0];
        let bw = Bandwidth::manual(0.8).unwrap();
        let c = estimate_gate(&scores(psi.clone()), &z, &[vec![2.0]], &bw, KernelSpec::default(), 0.95).unwrap();
        let p = &c.points[0];
        let fit = kernel::nw_regress(&psi, &z.standardized, &[0.0], 0.8, KernelSpec::default()).unwrap();
        let local: f64 = fit.weights.iter().zip(&psi).map(|(w, v)| w * (v - fit.estimate).powi(2)).sum();
        let sigma2 = KernelSpec::default().roughness() * local / fit.f_hat;
        let se = (sigma2 / (5.0 * 0.8)).sqrt();
        assert!((p.std_error - se).abs() < 1e-12);
        assert!((p.ci_upper - p.estimate - 1.959_963_984_540_054 * se).abs() < 1e-9);
    }

    #[test]
    fn query_grids() {
        let ds = dataset((0..=100).map(f64::from).collect(), 1);
        let q = default_query_grid(&ds, 5).unwrap();
        assert_eq!(q.len(), 5);
        assert!((q[0][0] - 5.0).abs() < 1e-12 && (q[4][0] - 95.0).abs() < 1e-12);
        assert!((q[1][0] - q[0][0] - 22.5).abs() < 1e-12);
        let ds2 = dataset((0..60).map(|i| f64::from(i * 7 % 13)).collect(), 2);
        assert_eq!(default_query_grid(&ds2, 5).unwrap().len(), 25);
        let flat = dataset(vec![1.0; 8], 1);
        assert!(default_query_grid(&flat, 5).unwrap_err().to_string().contains("zero variance"));
    }

    #[test]
    fn far_query_is_marked_not_fatal() {
        let ds = dataset((0..10).map(f64::from).collect(), 1);
        let z = Moderators::from_dataset(&ds).unwrap();
        let c = estimate_gate(&scores(vec![1.0; 10]), &z, &[vec![4.0], vec![1e4]], &Bandwidth::manual(0.3).unwrap(), KernelSpec::default(), 0.95)
            .unwrap();
        assert!(!c.points[0].no_local_data);
        assert!(c.points[1].no_local_data && c.points[1].estimate.is_nan());
        assert!(c.points[1].outside_core);
    }

    #[test]
    fn curve_csv_layout() {
        let ds = dataset((0..10).map(f64::from).collect(), 1);
        let z = Moderators::from_dataset(&ds).unwrap();
        let c = estimate_gate(&scores(vec![1.0; 10]), &z, &[vec![4.0]], &Bandwidth::manual(0.5).unwrap(), KernelSpec::default(), 0.95).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        c.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("z0,estimate,se,ci_lower,ci_upper,n_effective,f_hat,outside_core,no_local_data,variance_clamped\n"));
        assert!(text.ends_with('\n'));
    }
}
