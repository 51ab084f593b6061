//! Synthetic data with known nuisances and effects, and a Monte Carlo engine
//! that runs the full pipeline on repeated draws.
//!
//! Design: `X ~ N(0, I)`, the moderators are the first `λ_Z` columns, and
//! the effect depends on `u = Σ zₖ / √λ_Z ~ N(0, 1)`. With the first `s`
//! columns active and `ι = Σ_{j<s} xⱼ / √s`:
//!
//! ```text
//! p(x)  = logistic(κ ι)
//! m₀(x) = β Σ_{j<s} xⱼ
//! m₁(x) = m₀(x) + τ(u)
//! Y     = m_D(X) + σ ε
//! ```

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ate::{averaged_ate, smoothed_ate, AteResult};
use crate::crossfit::{NuisanceConfig, NuisanceFits};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gate::{estimate_gate, select_bandwidth, Moderators};
use crate::learners::LearnerKind;
use crate::pipeline::PipelineConfig;
use crate::rng;
use crate::score::{score, ScoreVariant};
use crate::stats;

/// Largest `κ` with `P(0.05 ≤ p ≤ 0.95) ≥ 0.99`: `logit(0.95) / z_{0.995}`.
pub fn max_overlap_strength() -> f64 {
    (0.95f64 / 0.05).ln() / stats::normal_critical(0.99)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum TauShape {
    Constant { value: f64 },
    Linear { intercept: f64, slope: f64 },
    /// `amplitude · sin(frequency · u + phase)`.
    Sine { amplitude: f64, frequency: f64, phase: f64 },
}

impl TauShape {
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            TauShape::Constant { value } => value,
            TauShape::Linear { intercept, slope } => intercept + slope * u,
            TauShape::Sine { amplitude, frequency, phase } => amplitude * (frequency * u + phase).sin(),
        }
    }

    /// `E τ(U)` for `U ~ N(0, 1)`.
    pub fn mean(&self) -> f64 {
        match *self {
            TauShape::Constant { value } => value,
            TauShape::Linear { intercept, .. } => intercept,
            TauShape::Sine { amplitude, frequency, phase } => amplitude * phase.sin() * (-0.5 * frequency * frequency).exp(),
        }
    }

    /// `Var τ(U)` for `U ~ N(0, 1)`.
    pub fn variance(&self) -> f64 {
        match *self {
            TauShape::Constant { .. } => 0.0,
            TauShape::Linear { slope, .. } => slope * slope,
            TauShape::Sine { amplitude, frequency, phase } => {
                let f2 = frequency * frequency;
                let second = 0.5 * (1.0 - (2.0 * phase).cos() * (-2.0 * f2).exp());
                let first = phase.sin() * (-0.5 * f2).exp();
                amplitude * amplitude * (second - first * first)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub n: usize,
    pub lambda_x: usize,
    pub lambda_z: usize,
    /// Number of active confounders.
    pub s: usize,
    pub tau: TauShape,
    /// Logistic slope `κ` of the propensity index.
    pub overlap_strength: f64,
    /// Coefficient `β` of each active confounder in `m₀`.
    pub outcome_coef: f64,
    pub noise_sd: f64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            n: 2000,
            lambda_x: 10,
            lambda_z: 1,
            s: 4,
            tau: TauShape::Linear { intercept: 1.0, slope: 1.0 },
            overlap_strength: 0.8,
            outcome_coef: 1.0,
            noise_sd: 1.0,
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 8 {
            return Err(Error::Validation(format!("dgp.n must be at least 8, got {}", self.n)));
        }
        if self.lambda_z == 0 || self.lambda_z > self.lambda_x {
            return Err(Error::Validation("dgp.lambda_z must lie in 1..=lambda_x".into()));
        }
        if self.s == 0 || self.s > self.lambda_x {
            return Err(Error::Validation("dgp.s must lie in 1..=lambda_x".into()));
        }
        if !(self.noise_sd >= 0.0) || !self.outcome_coef.is_finite() {
            return Err(Error::Validation("dgp.noise_sd must be non-negative and outcome_coef finite".into()));
        }
        let kmax = max_overlap_strength();
        if !(self.overlap_strength >= 0.0 && self.overlap_strength <= kmax) {
            return Err(Error::Validation(format!(
                "dgp.overlap_strength must lie in [0, {kmax:.4}] so that p stays in [0.05, 0.95] with probability 0.99"
            )));
        }
        Ok(())
    }

    /// Semiparametric variance bound for the ATE under this design:
    /// `σ² E[1/p + 1/(1−p)] + Var τ(U) = σ² (2 + 2e^{κ²/2}) + Var τ(U)`.
    pub fn efficiency_bound(&self) -> f64 {
        let k = self.overlap_strength;
        self.noise_sd.powi(2) * (2.0 + 2.0 * (0.5 * k * k).exp()) + self.tau.variance()
    }

    pub fn theta(&self) -> f64 {
        self.tau.mean()
    }

    /// True effect at moderator value `z`.
    pub fn gate(&self, z: &[f64]) -> f64 {
        self.tau.eval(z.iter().sum::<f64>() / (z.len() as f64).sqrt())
    }
}

/// True nuisance values for one generated sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub p: Vec<f64>,
    pub m0: Vec<f64>,
    pub m1: Vec<f64>,
    pub tau: Vec<f64>,
    pub theta: f64,
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Draws one sample from the design.
pub fn generate(spec: &DgpSpec, seed: u64) -> Result<(Dataset, Truth)> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[rng::tag::DGP]);
    let (n, p) = (spec.n, spec.lambda_x);
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            x[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    let root_s = (spec.s as f64).sqrt();
    let root_z = (spec.lambda_z as f64).sqrt();
    let mut truth = Truth { p: vec![0.0; n], m0: vec![0.0; n], m1: vec![0.0; n], tau: vec![0.0; n], theta: spec.theta() };
    let mut y = vec![0.0; n];
    let mut d = vec![0u8; n];
    for i in 0..n {
        let active: f64 = (0..spec.s).map(|j| x[(i, j)]).sum();
        let u = (0..spec.lambda_z).map(|j| x[(i, j)]).sum::<f64>() / root_z;
        let pi = logistic(spec.overlap_strength * active / root_s);
        let m0 = spec.outcome_coef * active;
        let tau = spec.tau.eval(u);
        let di = u8::from(rng.random::<f64>() < pi);
        let eps: f64 = StandardNormal.sample(&mut rng);
        y[i] = if di == 1 { m0 + tau } else { m0 } + spec.noise_sd * eps;
        d[i] = di;
        truth.p[i] = pi;
        truth.m0[i] = m0;
        truth.m1[i] = m0 + tau;
        truth.tau[i] = tau;
    }
    let names = (0..p).map(|j| format!("x{j}")).collect();
    let ds = Dataset::new(y, d, x, names, (0..spec.lambda_z).collect())?.with_names("y", "d");
    Ok((ds, truth))
}

/// How an arm obtains its nuisances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    /// Use the true nuisance functions instead of fitting.
    #[serde(default)]
    pub oracle: bool,
    #[serde(default)]
    pub propensity: Option<Vec<LearnerKind>>,
    #[serde(default)]
    pub outcome: Option<Vec<LearnerKind>>,
}

impl ArmSpec {
    pub fn fitted(name: &str, propensity: LearnerKind, outcome: LearnerKind) -> Self {
        ArmSpec { name: name.into(), oracle: false, propensity: Some(vec![propensity]), outcome: Some(vec![outcome]) }
    }

    pub fn oracle(name: &str) -> Self {
        ArmSpec { name: name.into(), oracle: true, propensity: None, outcome: None }
    }

    fn learners(&self, base: &NuisanceConfig) -> NuisanceConfig {
        NuisanceConfig {
            propensity: self.propensity.clone().unwrap_or_else(|| base.propensity.clone()),
            outcome: self.outcome.clone().unwrap_or_else(|| base.outcome.clone()),
            settings: base.settings.clone(),
        }
    }
}

/// A Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSpec {
    pub dgp: DgpSpec,
    pub replications: usize,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    /// Empty means one arm named "main" using the pipeline's learners.
    pub arms: Vec<ArmSpec>,
    /// GATE query points; empty skips GATE estimation.
    pub queries: Vec<Vec<f64>>,
    pub smoothed_ate: bool,
    /// Largest tolerated share of failed replications.
    pub max_failure_rate: f64,
}

impl Default for McSpec {
    fn default() -> Self {
        McSpec {
            dgp: DgpSpec::default(),
            replications: 100,
            seed: 1,
            pipeline: PipelineConfig::default(),
            arms: Vec::new(),
            queries: vec![vec![-1.0], vec![0.0], vec![1.0]],
            smoothed_ate: true,
            max_failure_rate: 0.05,
        }
    }
}

impl McSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::Validation(format!("replications must be at least 2, got {}", self.replications)));
        }
        if !(0.0..1.0).contains(&self.max_failure_rate) {
            return Err(Error::Validation("max_failure_rate must lie in [0, 1)".into()));
        }
        if let Some(q) = self.queries.iter().find(|q| q.len() != self.dgp.lambda_z) {
            return Err(Error::Validation(format!("query {q:?} must have lambda_z = {} coordinates", self.dgp.lambda_z)));
        }
        let mut names: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("arm names must be unique".into()));
        }
        self.dgp.validate()?;
        self.pipeline.validate()
    }

    fn arm_list(&self) -> Vec<ArmSpec> {
        if self.arms.is_empty() {
            vec![ArmSpec { name: "main".into(), oracle: false, propensity: None, outcome: None }]
        } else {
            self.arms.clone()
        }
    }
}

/// Per-replication output of one arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmDraw {
    pub aipw: AteResult,
    pub ipw: AteResult,
    pub outcome: AteResult,
    pub smoothed: Option<AteResult>,
    pub gate_estimate: Vec<f64>,
    pub gate_se: Vec<f64>,
    pub bandwidth: Option<f64>,
    pub clip_count: usize,
}

fn run_arm(spec: &McSpec, arm: &ArmSpec, ds: &Dataset, truth: &Truth, seed: u64) -> Result<ArmDraw> {
    let cfg = &spec.pipeline;
    let fits = if arm.oracle {
        NuisanceFits::from_values(truth.p.clone(), truth.m0.clone(), truth.m1.clone(), cfg.trim_c)?
    } else {
        cfg.fit_nuisances_with(ds, &arm.learners(&cfg.learners), seed)?
    };
    let clip_count = fits.p_hat.iter().zip(&fits.p_raw).filter(|(a, b)| a != b).count();
    let level = cfg.level;
    let psi = score(ds, &fits, cfg.score)?;
    let aipw = averaged_ate(&score(ds, &fits, ScoreVariant::Aipw)?, level)?;
    let ipw = averaged_ate(&score(ds, &fits, ScoreVariant::Ipw)?, level)?;
    let outcome = averaged_ate(&score(ds, &fits, ScoreVariant::Outcome)?, level)?;
    let mut draw = ArmDraw {
        aipw,
        ipw,
        outcome,
        smoothed: None,
        gate_estimate: Vec::new(),
        gate_se: Vec::new(),
        bandwidth: None,
        clip_count,
    };
    if spec.queries.is_empty() && !spec.smoothed_ate {
        return Ok(draw);
    }
    let z = Moderators::from_dataset(ds)?;
    let kernel = cfg.kernel()?;
    let bw = select_bandwidth(&psi.psi, &z, kernel, &cfg.bandwidth)?;
    draw.bandwidth = Some(bw.h);
    if !spec.queries.is_empty() {
        let curve = estimate_gate(&psi, &z, &spec.queries, &bw, kernel, level)?;
        draw.gate_estimate = curve.points.iter().map(|p| p.estimate).collect();
        draw.gate_se = curve.points.iter().map(|p| p.std_error).collect();
    }
    if spec.smoothed_ate {
        draw.smoothed = Some(smoothed_ate(&psi, &z, &bw, kernel, level)?);
    }
    Ok(draw)
}

/// Monte Carlo summary of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Monte Carlo standard deviation of the estimates.
    pub mc_sd: f64,
    /// Standard error of the bias, `mc_sd / √R`.
    pub mc_se: f64,
    pub rmse: f64,
    pub mean_se: f64,
    /// `mc_sd / mean_se`.
    pub se_calibration: f64,
    pub coverage: f64,
    pub replications: usize,
}

fn summarize(estimates: &[f64], ses: &[f64], truth: f64, crit: f64) -> EstimatorSummary {
    let r = estimates.len();
    let mean = stats::mean(estimates);
    let mc_sd = stats::sd(estimates);
    let mean_se = stats::mean(ses);
    let covered = estimates.iter().zip(ses).filter(|(e, s)| (*e - truth).abs() <= crit * *s).count();
    EstimatorSummary {
        truth,
        mean,
        bias: mean - truth,
        mc_sd,
        mc_se: mc_sd / (r as f64).sqrt(),
        rmse: (estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / r as f64).sqrt(),
        mean_se,
        se_calibration: mc_sd / mean_se,
        coverage: covered as f64 / r as f64,
        replications: r,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateQuerySummary {
    pub query: Vec<f64>,
    #[serde(flatten)]
    pub summary: EstimatorSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmReport {
    pub name: String,
    pub oracle: bool,
    pub averaged_aipw: EstimatorSummary,
    pub averaged_ipw: EstimatorSummary,
    pub averaged_outcome: EstimatorSummary,
    pub smoothed_aipw: Option<EstimatorSummary>,
    /// `N · Var_MC(θ̂_smoothed)`, comparable to the efficiency bound.
    pub smoothed_scaled_variance: Option<f64>,
    /// Share of replications with `|smoothed − averaged AIPW| < SE/2`.
    pub smoothed_close_share: Option<f64>,
    /// Share of replications where the IPW standard error exceeds AIPW's.
    pub ipw_se_larger_share: f64,
    pub gate: Vec<GateQuerySummary>,
    pub mean_bandwidth: Option<f64>,
    pub mean_clip_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub spec: McSpec,
    pub replications: usize,
    pub failed: usize,
    pub failures: Vec<String>,
    pub theta: f64,
    pub efficiency_bound: f64,
    pub arms: Vec<ArmReport>,
    /// Per-replication results of successful replications, indexed like `arms`.
    #[serde(skip)]
    pub draws: Vec<(usize, Vec<ArmDraw>)>,
}

impl McReport {
    /// One row per replication, arm and estimator; GATE rows are named
    /// `gate_<query index>`.
    pub fn write_replications_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["replication", "arm", "method", "estimate", "std_error"])?;
        for (k, arms) in &self.draws {
            for (arm, d) in self.arms.iter().zip(arms) {
                let mut row = |method: String, est: f64, se: f64| {
                    w.write_record([k.to_string(), arm.name.clone(), method, format!("{est:?}"), format!("{se:?}")])
                };
                for r in [Some(&d.aipw), Some(&d.ipw), Some(&d.outcome), d.smoothed.as_ref()].into_iter().flatten() {
                    row(r.method.name().to_string(), r.estimate, r.std_error)?;
                }
                for (q, (e, s)) in d.gate_estimate.iter().zip(&d.gate_se).enumerate() {
                    row(format!("gate_{q}"), *e, *s)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn arm_report(spec: &McSpec, arm: &ArmSpec, draws: &[&ArmDraw]) -> ArmReport {
    let crit = stats::normal_critical(spec.pipeline.level);
    let theta = spec.dgp.theta();
    let col = |f: &dyn Fn(&ArmDraw) -> &AteResult| -> EstimatorSummary {
        let e: Vec<f64> = draws.iter().map(|d| f(d).estimate).collect();
        let s: Vec<f64> = draws.iter().map(|d| f(d).std_error).collect();
        summarize(&e, &s, theta, crit)
    };
    let r = draws.len() as f64;
    let smoothed_aipw = spec.smoothed_ate.then(|| col(&|d| d.smoothed.as_ref().unwrap()));
    let smoothed_scaled_variance = smoothed_aipw.as_ref().map(|s| spec.dgp.n as f64 * s.mc_sd.powi(2));
    let smoothed_close_share = spec.smoothed_ate.then(|| {
        draws
            .iter()
            .filter(|d| {
                let s = d.smoothed.as_ref().unwrap();
                (s.estimate - d.aipw.estimate).abs() < 0.5 * d.aipw.std_error
            })
            .count() as f64
            / r
    });
    let gate = spec
        .queries
        .iter()
        .enumerate()
        .map(|(q, query)| {
            let e: Vec<f64> = draws.iter().map(|d| d.gate_estimate[q]).collect();
            let s: Vec<f64> = draws.iter().map(|d| d.gate_se[q]).collect();
            GateQuerySummary { query: query.clone(), summary: summarize(&e, &s, spec.dgp.gate(query), crit) }
        })
        .collect();
    let bws: Vec<f64> = draws.iter().filter_map(|d| d.bandwidth).collect();
    ArmReport {
        name: arm.name.clone(),
        oracle: arm.oracle,
        averaged_aipw: col(&|d| &d.aipw),
        averaged_ipw: col(&|d| &d.ipw),
        averaged_outcome: col(&|d| &d.outcome),
        smoothed_aipw,
        smoothed_scaled_variance,
        smoothed_close_share,
        ipw_se_larger_share: draws.iter().filter(|d| d.ipw.std_error > d.aipw.std_error).count() as f64 / r,
        gate,
        mean_bandwidth: (!bws.is_empty()).then(|| stats::mean(&bws)),
        mean_clip_count: draws.iter().map(|d| d.clip_count as f64).sum::<f64>() / r,
    }
}

/// Runs every replication (in parallel, aggregated in replication order).
///
/// Replication `k` draws its data from seed path `[REPLICATION, k]` of the
/// spec's seed; all arms of a replication share that sample.
pub fn run_mc(spec: &McSpec) -> Result<McReport> {
    spec.validate()?;
    let arms = spec.arm_list();
    let results: Vec<Result<Vec<ArmDraw>>> = (0..spec.replications)
        .into_par_iter()
        .map(|k| {
            let rep_seed = rng::derive_seed(spec.seed, &[rng::tag::REPLICATION, k as u64]);
            let (ds, truth) = generate(&spec.dgp, rep_seed)?;
            arms.iter().map(|arm| run_arm(spec, arm, &ds, &truth, rep_seed)).collect()
        })
        .collect();
    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(d) => ok.push((k, d)),
            Err(e) => failures.push(format!("replication {k}: {e}")),
        }
    }
    let total = spec.replications;
    if failures.len() as f64 > spec.max_failure_rate * total as f64 || ok.len() < 2 {
        return Err(Error::ReplicationFailures { failed: failures.len(), total, first: failures[0].clone() });
    }
    let arm_reports = arms
        .iter()
        .enumerate()
        .map(|(a, arm)| {
            let draws: Vec<&ArmDraw> = ok.iter().map(|(_, d)| &d[a]).collect();
            arm_report(spec, arm, &draws)
        })
        .collect();
    Ok(McReport {
        spec: spec.clone(),
        replications: ok.len(),
        failed: failures.len(),
        failures,
        theta: spec.dgp.theta(),
        efficiency_bound: spec.dgp.efficiency_bound(),
        arms: arm_reports,
        draws: ok,
    })
}
