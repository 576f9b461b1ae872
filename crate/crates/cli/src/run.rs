//! Runs every configured variant of a scenario, evaluates the enabled
//! verifiers and writes trajectories and reports.

use std::fs;
use std::path::{Path, PathBuf};

use augpd_core::{
    default_window, equilibrium_of, evaluate_cost, nominal_controller, reference_solution, simulate, transient_metrics,
    verify_identities, verify_optimality, CostBreakdown, Error, IdentityReport, OptimalityReport, Reference,
    System, TransientMetrics, Variant,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::output::write_trajectory;
use crate::scenario::{RunSpec, Scenario};

/// Settled primal point vs. reference solver.
pub const ORACLE_TOLERANCE: f64 = 1e-5;
/// Relative gap between trajectory cost and initial storage.
pub const COST_IDENTITY_TOLERANCE: f64 = 1e-4;
/// Relative gap between cost excess and perturbation energy.
pub const PERTURBATION_TOLERANCE: f64 = 1e-3;
/// Sup-norm gap between the direct and rewritten feed-forward forms.
pub const FORMS_TOLERANCE: f64 = 1e-6;
/// Dual states may dip this far below zero at samples.
pub const DUAL_FLOOR: f64 = -1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            status: if passed { Status::Pass } else { Status::Fail },
            detail,
        }
    }

    fn skipped(name: &str, detail: &str) -> Self {
        Check {
            name: name.into(),
            status: Status::NotApplicable,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub label: String,
    pub variant: Variant,
    pub samples: usize,
    pub converged: bool,
    pub final_theta: Vec<f64>,
    pub final_lambda: Vec<f64>,
    pub oracle_theta: Option<Vec<f64>>,
    pub metrics: TransientMetrics<f64>,
    pub cost: Option<CostBreakdown<f64>>,
    pub identities: Option<IdentityReport<f64>>,
    pub optimality: Option<OptimalityReport<f64>>,
    /// Sup-norm distance between the θ trajectories of the two feed-forward forms.
    pub forms_gap: Option<f64>,
    pub min_dual_state: Option<f64>,
    pub checks: Vec<Check>,
    /// Wall-clock time of the nominal simulation; kept out of the JSON so
    /// reports stay byte-identical across reruns.
    #[serde(skip)]
    pub simulation_seconds: f64,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub dt: f64,
    pub t_end: f64,
    pub passed: bool,
    pub runs: Vec<RunReport>,
    pub comparison: Option<ComparisonReport>,
}

#[derive(Debug, Clone, Serialize)]
struct RunSummary<'a> {
    label: &'a str,
    variant: Variant,
    converged: bool,
    settling_time: Option<f64>,
    oscillation_count: usize,
    overshoot: f64,
    failed_checks: Vec<&'a str>,
}

#[derive(Debug, Clone, Serialize)]
struct Summary<'a> {
    name: &'a str,
    passed: bool,
    runs: Vec<RunSummary<'a>>,
    comparison: Option<&'a ComparisonReport>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where CSV and JSON files go; `None` disables all file output.
    pub out_dir: Option<PathBuf>,
}

/// Output directory: explicit choice, then the scenario's own, then `out/<name>`.
pub fn resolve_out_dir(explicit: Option<PathBuf>, scenario: &Scenario) -> PathBuf {
    explicit
        .or_else(|| scenario.output.clone())
        .unwrap_or_else(|| Path::new("out").join(&scenario.name))
}

fn sup_theta_gap(a: &augpd_core::Trajectory64, b: &augpd_core::Trajectory64) -> f64 {
    a.outputs
        .iter()
        .zip(&b.outputs)
        .flat_map(|(x, y)| x.theta.iter().zip(&y.theta).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

fn run_one(scenario: &Scenario, spec: &RunSpec, oracle: &Option<Vec<f64>>, opts: &RunOptions) -> Result<RunReport> {
    let sys = &spec.system;
    let integ = &scenario.integration;
    let verify = &scenario.verify;
    let started = std::time::Instant::now();
    let traj = simulate(sys, &nominal_controller(sys), &spec.initial, integ.dt, integ.t_end)?;
    let simulation_seconds = started.elapsed().as_secs_f64();
    let mut checks = Vec::new();

    let eq = equilibrium_of(sys, &traj, default_window(traj.len()))?;
    checks.push(Check::new(
        "converged",
        eq.converged,
        format!("state movement over the trailing window: {:e}", eq.movement),
    ));
    let final_out = traj.final_outputs().clone();
    let target = oracle.clone().unwrap_or_else(|| final_out.theta.clone());
    let metrics = transient_metrics(&traj, &target, integ.band_fraction)?;

    let min_dual_state = traj
        .states
        .iter()
        .flat_map(|s| s.tau.iter().copied())
        .reduce(f64::min);
    match min_dual_state {
        Some(m) => checks.push(Check::new("dual_nonnegative", m >= DUAL_FLOOR, format!("smallest dual state {m:e}"))),
        None => checks.push(Check::skipped("dual_nonnegative", "no dual states")),
    }

    let mut cost = None;
    let mut identities = None;
    let mut optimality = None;
    let cost_defined = !(sys.variant() == Variant::Consensus && sys.has_edge_feedforward());
    let reference = if eq.converged {
        Some(Reference::from_state(sys, eq.state.clone())?)
    } else {
        None
    };

    if verify.oracle {
        match (oracle, &reference) {
            (Some(star), Some(r)) => {
                let dev = r.theta.iter().zip(star).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                checks.push(Check::new("oracle", dev < ORACLE_TOLERANCE, format!("max |theta - theta*| = {dev:e}")));
            }
            (None, _) => checks.push(Check::new("oracle", false, "reference solver failed".into())),
            (_, None) => checks.push(Check::skipped("oracle", "run did not settle")),
        }
    }

    let skip_reason = if reference.is_none() {
        Some("run did not settle")
    } else if !cost_defined {
        Some("direct edge feed-forward form has no cost decomposition; use the feedforward variant")
    } else {
        None
    };
    if let (Some(r), None) = (&reference, skip_reason) {
        if verify.cost_identity {
            let c = evaluate_cost(sys, &traj, r)?;
            let rel = (c.total_cost - c.storage_at_start).abs() / c.storage_at_start;
            checks.push(Check::new(
                "cost_identity",
                rel < COST_IDENTITY_TOLERANCE,
                format!("J = {:.12}, V(x0) = {:.12}, relative gap {rel:e}", c.total_cost, c.storage_at_start),
            ));
            cost = Some(c);
        }
        if verify.identities {
            let ids = verify_identities(sys, &traj, r)?;
            checks.push(Check::new("identities", ids.passes(), identity_detail(&ids)));
            identities = Some(ids);
        }
        if verify.perturbations > 0 {
            match verify_optimality(sys, &spec.initial, integ.dt, integ.t_end, verify.perturbations, scenario.seed) {
                Ok(o) => {
                    checks.push(perturbation_check(&o));
                    optimality = Some(o);
                }
                Err(Error::Unsupported(m)) => checks.push(Check::skipped("perturbations", &m)),
                Err(e) => return Err(e.into()),
            }
        }
    } else {
        let why = skip_reason.unwrap_or_default();
        for (on, name) in [
            (verify.cost_identity, "cost_identity"),
            (verify.identities, "identities"),
            (verify.perturbations > 0, "perturbations"),
        ] {
            if on {
                checks.push(Check::skipped(name, why));
            }
        }
    }

    let mut forms_gap = None;
    if verify.forms && sys.variant() == Variant::FeedForward {
        let direct = System::new(sys.problem().clone(), sys.profile().clone(), Variant::Consensus)?;
        let other = simulate(&direct, &nominal_controller(&direct), &spec.initial, integ.dt, integ.t_end)?;
        let gap = sup_theta_gap(&traj, &other);
        checks.push(Check::new("forms_agree", gap < FORMS_TOLERANCE, format!("sup |theta_direct - theta_rewritten| = {gap:e}")));
        forms_gap = Some(gap);
    }

    if let Some(dir) = &opts.out_dir {
        write_trajectory(&dir.join(format!("{}.csv", spec.label)), scenario, sys, &traj, scenario.csv_stride)?;
    }

    Ok(RunReport {
        label: spec.label.clone(),
        variant: sys.variant(),
        samples: traj.len(),
        converged: eq.converged,
        final_theta: final_out.theta,
        final_lambda: final_out.lambda,
        oracle_theta: oracle.clone(),
        metrics,
        cost,
        identities,
        optimality,
        forms_gap,
        min_dual_state,
        checks,
        simulation_seconds,
    })
}

fn identity_detail(ids: &IdentityReport<f64>) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:e}"));
    format!(
        "interconnection {}, bregman {:e}, constraint slack {}, integrand min {:e}, storage rate {:e}",
        opt(ids.interconnection_residual),
        ids.bregman_residual,
        opt(ids.constraint_slack),
        ids.integrand_min,
        ids.storage_increase_rate
    )
}

fn perturbation_check(o: &OptimalityReport<f64>) -> Check {
    match o.max_relative_error {
        None => Check::skipped(
            "perturbations",
            &format!("all {} perturbed runs settled at a different equilibrium", o.not_applicable),
        ),
        Some(err) => Check::new(
            "perturbations",
            err < PERTURBATION_TOLERANCE && o.excess_nonnegative,
            format!(
                "{} samples ({} not applicable), max relative error {err:e}, excess never negative: {}",
                o.samples.len(),
                o.not_applicable,
                o.excess_nonnegative
            ),
        ),
    }
}

fn compare(baseline: &str, runs: &[RunReport]) -> ComparisonReport {
    let base = runs.iter().find(|r| r.label == baseline).expect("validated baseline");
    let others: Vec<&RunReport> = runs.iter().filter(|r| r.label != baseline).collect();
    let settle = |r: &RunReport| r.metrics.settling_time.unwrap_or(f64::INFINITY);
    let slower = others.iter().all(|r| settle(base) > settle(r));
    let rings = others.iter().all(|r| base.metrics.oscillation_count > r.metrics.oscillation_count);
    let listing = |f: &dyn Fn(&RunReport) -> String| runs.iter().map(|r| format!("{}: {}", r.label, f(r))).collect::<Vec<_>>().join(", ");
    ComparisonReport {
        baseline: baseline.into(),
        checks: vec![
            Check::new(
                "baseline_settles_slowest",
                slower,
                listing(&|r| r.metrics.settling_time.map_or("unsettled".into(), |t| format!("{t:.4} s"))),
            ),
            Check::new(
                "baseline_oscillates_most",
                rings,
                listing(&|r| format!("{} crossings", r.metrics.oscillation_count)),
            ),
        ],
    }
}

/// Runs all variants concurrently and, if an output directory is given,
/// writes `<label>.csv`, `report.json` and `summary.json` into it.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<ScenarioReport> {
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let oracle = reference_solution(&scenario.problem).ok().map(|s| s.theta_star);
    let runs = scenario
        .runs
        .par_iter()
        .map(|spec| run_one(scenario, spec, &oracle, opts))
        .collect::<Result<Vec<_>>>()?;
    let comparison = scenario.comparison.as_ref().map(|c| compare(&c.baseline, &runs));
    let passed = runs.iter().all(RunReport::passed)
        && comparison
            .as_ref()
            .is_none_or(|c| c.checks.iter().all(|k| k.status != Status::Fail));
    let report = ScenarioReport {
        name: scenario.name.clone(),
        seed: scenario.seed,
        dt: scenario.integration.dt,
        t_end: scenario.integration.t_end,
        passed,
        runs,
        comparison,
    };
    if let Some(dir) = &opts.out_dir {
        write_json(&dir.join("report.json"), &report)?;
        write_json(&dir.join("summary.json"), &summarize(&report))?;
    }
    Ok(report)
}

fn summarize(report: &ScenarioReport) -> Summary<'_> {
    Summary {
        name: &report.name,
        passed: report.passed,
        runs: report
            .runs
            .iter()
            .map(|r| RunSummary {
                label: &r.label,
                variant: r.variant,
                converged: r.converged,
                settling_time: r.metrics.settling_time,
                oscillation_count: r.metrics.oscillation_count,
                overshoot: r.metrics.overshoot,
                failed_checks: r.checks.iter().filter(|c| c.status == Status::Fail).map(|c| c.name.as_str()).collect(),
            })
            .collect(),
        comparison: report.comparison.as_ref(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

