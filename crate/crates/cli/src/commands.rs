use std::path::{Path, PathBuf};

use drgate::ate::{write_comparison_csv, AteResult};
use drgate::gate::default_query_grid;
use drgate::theory::{ate_range, check_config, gate_range, Diagnostic, RateRange};
use drgate::{
    averaged_ate, compare_ate, estimate_gate, load_csv, run_mc, score, select_bandwidth, smoothed_ate, support_report,
    Bandwidth, Dataset, Moderators, RateSpec, Regime, ScoreVariant,
};
use serde::Serialize;

use crate::config::{load_run, load_simulation, RunConfig};
use crate::output::{to_json, RunOutputs};
use crate::CliError;

pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

fn require_config(g: &Globals) -> Result<&Path, CliError> {
    g.config.as_deref().ok_or_else(|| CliError::Input("this command needs --config <path>".into()))
}

fn prepare_run(g: &Globals, data: Option<PathBuf>) -> Result<(RunConfig, Dataset), CliError> {
    let mut cfg = load_run(require_config(g)?)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(path) = data {
        cfg.data.path = Some(path);
    }
    cfg.pipeline.validate()?;
    let path = cfg.data.path.clone().ok_or_else(|| CliError::Input("no data file: set data.path or pass --data".into()))?;
    let all = load_csv(&path, &cfg.load_roles())?;
    let ds = all.with_moderators(moderator_indices(&all.x_names, &cfg.data.columns.moderators)?)?;
    Ok((cfg, ds))
}

fn moderator_indices(names: &[String], moderators: &[String]) -> Result<Vec<usize>, CliError> {
    moderators
        .iter()
        .map(|m| {
            names
                .iter()
                .position(|n| n == m)
                .ok_or_else(|| CliError::Input(format!("moderator '{m}' is not among the loaded columns")))
        })
        .collect()
}

fn warn_support(report: &drgate::SupportReport) {
    if report.overlap_warning {
        eprintln!(
            "warning: {} of {} propensity predictions ({:.1}%) were clipped to [{}, {}]; overlap is weak",
            report.clip_count,
            report.n,
            100.0 * report.clip_fraction,
            report.trim_c,
            1.0 - report.trim_c
        );
    }
}

fn multiple_label(m: f64) -> String {
    format!("{m}")
}

pub fn estimate_gate_cmd(g: &Globals, data: Option<PathBuf>, sensitivity: &[f64], export_scores: bool) -> Result<(), CliError> {
    if let Some(m) = sensitivity.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
        return Err(CliError::Input(format!("sensitivity multiples must be positive, got {m}")));
    }
    let (cfg, ds) = prepare_run(g, data)?;
    let p = &cfg.pipeline;
    let mut out = RunOutputs::new(&g.out_dir)?;
    let fits = p.fit_nuisances(&ds, cfg.seed)?;
    let support = support_report(&fits, &ds.d);
    warn_support(&support);
    out.write_json("support_report.json", &support)?;
    let psi = score(&ds, &fits, p.score)?;
    if export_scores {
        psi.write_csv(out.path("scores.csv"))?;
        out.record("scores.csv")?;
    }
    let z = Moderators::from_dataset(&ds)?;
    let kernel = p.kernel()?;
    let bw = select_bandwidth(&psi.psi, &z, kernel, &p.bandwidth)?;
    let queries = match &cfg.queries {
        Some(q) => q.clone(),
        None => default_query_grid(&ds, cfg.query_points)?,
    };
    let curve = estimate_gate(&psi, &z, &queries, &bw, kernel, p.level)?;
    curve.write_csv(out.path("gate_curve.csv"))?;
    out.record("gate_curve.csv")?;
    out.write_json("gate_curve.json", &curve)?;
    let empty = curve.points.iter().filter(|pt| pt.no_local_data).count();
    if empty > 0 {
        eprintln!("warning: {empty} query point(s) have no local data; their estimates are NaN");
    }
    for &m in sensitivity {
        let c = estimate_gate(&psi, &z, &queries, &bw.rescaled(m), kernel, p.level)?;
        let name = format!("gate_curve_bw{}.csv", multiple_label(m));
        c.write_csv(out.path(&name))?;
        out.record(&name)?;
    }
    println!(
        "estimate-gate: n = {}, moderators = {}, h = {:.6} (raw {:.6}), {} points written to {}",
        ds.n(),
        z.names.join("+"),
        bw.h,
        bw.raw,
        curve.points.len(),
        g.out_dir.display()
    );
    out.finish("estimate-gate", &serde_json::to_value(&cfg).expect("config serializes"), cfg.seed)?;
    Ok(())
}

#[derive(Serialize)]
struct AteOutput<'a> {
    n: usize,
    seed: u64,
    results: &'a [AteResult],
    comparison: &'a [drgate::AteComparison],
}

pub fn estimate_ate_cmd(g: &Globals, data: Option<PathBuf>, flat: bool, export_scores: bool) -> Result<(), CliError> {
    let (cfg, ds) = prepare_run(g, data)?;
    let p = &cfg.pipeline;
    let mut out = RunOutputs::new(&g.out_dir)?;
    let fits = p.fit_nuisances(&ds, cfg.seed)?;
    let support = support_report(&fits, &ds.d);
    warn_support(&support);
    out.write_json("support_report.json", &support)?;
    let aipw = score(&ds, &fits, ScoreVariant::Aipw)?;
    if export_scores {
        aipw.write_csv(out.path("scores.csv"))?;
        out.record("scores.csv")?;
    }
    let kernel = p.kernel()?;
    let mut results = Vec::new();
    for set in cfg.moderator_sets() {
        let sub = ds.with_moderators(moderator_indices(&ds.x_names, &set)?)?;
        let z = Moderators::from_dataset(&sub)?;
        let bw = if flat { Bandwidth::flat() } else { select_bandwidth(&aipw.psi, &z, kernel, &p.bandwidth)? };
        results.push(smoothed_ate(&aipw, &z, &bw, kernel, p.level)?);
    }
    results.push(averaged_ate(&aipw, p.level)?);
    results.push(averaged_ate(&score(&ds, &fits, ScoreVariant::Ipw)?, p.level)?);
    results.push(averaged_ate(&score(&ds, &fits, ScoreVariant::Outcome)?, p.level)?);
    let comparison = compare_ate(&results)?;
    out.write_json("ate_results.json", &AteOutput { n: ds.n(), seed: cfg.seed, results: &results, comparison: &comparison })?;
    write_comparison_csv(&comparison, out.path("ate_comparison.csv"))?;
    out.record("ate_comparison.csv")?;
    for r in &results {
        println!("{:<40} {:>14.6} (SE {:.6})", drgate::ate::label(r), r.estimate, r.std_error);
    }
    out.finish("estimate-ate", &serde_json::to_value(&cfg).expect("config serializes"), cfg.seed)?;
    Ok(())
}

pub fn simulate_cmd(g: &Globals, replications: Option<usize>, dump: bool) -> Result<(), CliError> {
    let mut spec = load_simulation(require_config(g)?)?;
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    if let Some(r) = replications {
        spec.replications = r;
    }
    spec.validate()?;
    let mut out = RunOutputs::new(&g.out_dir)?;
    let report = run_mc(&spec)?;
    out.write_json("mc_report.json", &report)?;
    if dump {
        report.write_replications_csv(out.path("replications.csv"))?;
        out.record("replications.csv")?;
    }
    println!(
        "simulate: {} of {} replications succeeded, theta = {:.6}, efficiency bound = {:.6}",
        report.replications, spec.replications, report.theta, report.efficiency_bound
    );
    for arm in &report.arms {
        let a = &arm.averaged_aipw;
        println!(
            "  {:<16} averaged AIPW bias {:+.5} (MC SE {:.5}), RMSE {:.5}, coverage {:.3}",
            arm.name, a.bias, a.mc_se, a.rmse, a.coverage
        );
        for q in &arm.gate {
            println!(
                "  {:<16} GATE at {:?}: bias {:+.5}, RMSE {:.5}, coverage {:.3}",
                "", q.query, q.summary.bias, q.summary.rmse, q.summary.coverage
            );
        }
    }
    out.finish("simulate", &serde_json::to_value(&spec).expect("spec serializes"), spec.seed)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RegimeArg {
    Gate,
    Ate,
    Both,
}

#[derive(Serialize)]
struct RangeOutput {
    spec: RateSpec,
    ranges: Vec<RateRange>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    diagnostics: Vec<Diagnostic>,
}

pub fn bandwidth_range_cmd(
    lambda_z: u32,
    kernel_order: u32,
    delta_p: f64,
    delta_m: f64,
    regime: RegimeArg,
    delta_h: Option<f64>,
) -> Result<(), CliError> {
    let spec = RateSpec::new(lambda_z, kernel_order, delta_p, delta_m)?;
    let regimes: Vec<Regime> = match regime {
        RegimeArg::Gate => vec![Regime::Gate],
        RegimeArg::Ate => vec![Regime::Ate],
        RegimeArg::Both => vec![Regime::Gate, Regime::Ate],
    };
    let ranges = regimes
        .iter()
        .map(|r| match r {
            Regime::Gate => gate_range(&spec),
            Regime::Ate => ate_range(&spec),
        })
        .collect();
    let diagnostics = match delta_h {
        Some(dh) => regimes.iter().map(|r| check_config(&spec, dh, *r)).collect(),
        None => Vec::new(),
    };
    print!("{}", to_json(&RangeOutput { spec, ranges, diagnostics }));
    Ok(())
}
