//! Batch studies built on the solvers: overlap sweeps, integrator
//! comparisons, sensitivity envelopes and constant reports.
//!
//! Every study returns plain rows and `Check`s; writing files is left to the
//! caller.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::controllability::{check_ucc, default_panels, UccReport};
use crate::error::{Error, Result};
use crate::ltv_model::{validate_assumptions, AssumptionReport, LqProblem};
use crate::ode::{IntegratorConfig, Method, TimeGrid};
use crate::pmp::GdConfig;
use crate::reference::solve_full_direct;
use crate::registry::{self, ProblemParams};
use crate::riccati::{
    boundary_perturbation_response, evolution_decay_check, point_perturbation_response, solve_riccati_full,
    theoretical_constants, ConstantsBundle, EnvelopeReport, Solution,
};
use crate::schwarz::{
    build_partition, fit_exponential, plateau_start, run_schwarz, substream, ControlInit,
    ConvergenceReport, Layout, RunConfig, SchwarzIterate, SchwarzOptions, NOISE_FLOOR,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Experiment {
    OverlapSweep,
    IntegratorCompare,
    StiffCompare,
    EdsBoundary,
    EdsPoint,
    ConstantsReport,
    UccReport,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::OverlapSweep,
        Experiment::IntegratorCompare,
        Experiment::StiffCompare,
        Experiment::EdsBoundary,
        Experiment::EdsPoint,
        Experiment::ConstantsReport,
        Experiment::UccReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::OverlapSweep => "overlap_sweep",
            Experiment::IntegratorCompare => "integrator_compare",
            Experiment::StiffCompare => "stiff_compare",
            Experiment::EdsBoundary => "eds_boundary",
            Experiment::EdsPoint => "eds_point",
            Experiment::ConstantsReport => "constants_report",
            Experiment::UccReport => "ucc_report",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Experiment::OverlapSweep => "Schwarz error decay and mean rate per overlap, exponential fit of rate vs overlap",
            Experiment::IntegratorCompare => "converged Schwarz error per subproblem integrator on a coarse grid",
            Experiment::StiffCompare => "Schwarz error histories per integrator on a stiff instance",
            Experiment::EdsBoundary => "response to boundary data perturbations against its exponential envelope",
            Experiment::EdsPoint => "response to point perturbations of the parameter against its envelope",
            Experiment::ConstantsReport => "theoretical constants, Riccati eigenvalue bounds, closed-loop decay",
            Experiment::UccReport => "controllability Gramian extremes over sliding windows",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown experiment '{}' (known: {})",
                s,
                Experiment::ALL.map(|e| e.name()).join(", ")
            ))
        })
    }
}

/// Everything a study needs besides the output location.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub problem: String,
    pub params: ProblemParams,
    /// Step of the reference solution (and of the Riccati grid for the
    /// sensitivity studies).
    pub dt_reference: f64,
    pub dt_subproblem: f64,
    pub m: usize,
    /// Overlaps as fractions of the subdomain length.
    pub overlaps: Vec<f64>,
    pub eta: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub integrators: Vec<Method>,
    /// Tolerance of the adaptive integrators (absolute and relative).
    pub adaptive_tol: f64,
    pub max_outer: usize,
    pub stop_tol: f64,
    /// UCC window length.
    pub sigma: f64,
    pub parallel: bool,
    /// Fresh random controls at every outer iteration instead of warm starts.
    pub cold_start: bool,
}

impl ExperimentConfig {
    /// Defaults for each study.
    pub fn preset(experiment: Experiment) -> Self {
        let base = ExperimentConfig {
            experiment,
            problem: "linearized_two_state".into(),
            params: ProblemParams::default(),
            dt_reference: 1e-3,
            dt_subproblem: 1e-3,
            m: 3,
            overlaps: vec![0.01, 0.05, 0.1, 0.2, 0.3, 0.6],
            eta: 1e-2,
            grad_tol: 1e-6,
            max_iters: 20_000,
            seed: 1,
            integrators: vec![Method::ForwardEuler],
            adaptive_tol: 1e-6,
            max_outer: 20,
            stop_tol: 1e-8,
            sigma: 1.0,
            parallel: true,
            cold_start: false,
        };
        let sensitivity = ExperimentConfig {
            problem: "margin_test_coupled".into(),
            params: ProblemParams { horizon: 10.0, ..ProblemParams::default() },
            dt_reference: 1e-2,
            dt_subproblem: 1e-2,
            overlaps: vec![0.1, 0.3, 0.6],
            integrators: vec![Method::Rk4],
            ..base.clone()
        };
        match experiment {
            Experiment::OverlapSweep => base,
            Experiment::IntegratorCompare => ExperimentConfig {
                dt_subproblem: 0.05,
                overlaps: vec![0.05],
                integrators: vec![Method::ForwardEuler, Method::BackwardEuler, Method::Rk45Fixed],
                ..base
            },
            Experiment::StiffCompare => ExperimentConfig {
                params: ProblemParams { xi: 15.0, horizon: 10.0, theta: 10.0, ..ProblemParams::default() },
                dt_subproblem: 0.05,
                overlaps: vec![0.05],
                integrators: vec![Method::ForwardEuler, Method::Rk23Adaptive],
                max_outer: 30,
                ..base
            },
            _ => sensitivity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt_reference", self.dt_reference),
            ("dt_subproblem", self.dt_subproblem),
            ("eta", self.eta),
            ("grad_tol", self.grad_tol),
            ("adaptive_tol", self.adaptive_tol),
            ("stop_tol", self.stop_tol),
            ("sigma", self.sigma),
            ("horizon", self.params.horizon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{} must be positive, got {}", name, v)));
            }
        }
        if self.m == 0 || self.max_iters == 0 || self.max_outer == 0 {
            return Err(Error::InvalidArgument("m, max_iters and max_outer must be positive".into()));
        }
        if self.overlaps.is_empty() || self.overlaps.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(Error::InvalidArgument("overlaps must be a non-empty list of fractions in (0, 1)".into()));
        }
        if self.integrators.is_empty() {
            return Err(Error::InvalidArgument("at least one integrator is required".into()));
        }
        registry::build::<f64>(&self.problem, &self.params).map(|_| ())
    }

    pub fn build_problem(&self) -> Result<LqProblem<f64>> {
        registry::build(&self.problem, &self.params)
    }

    pub fn integrator(&self, method: Method) -> IntegratorConfig<f64> {
        if method.is_adaptive() {
            IntegratorConfig::adaptive(method, self.adaptive_tol, self.adaptive_tol)
        } else {
            IntegratorConfig::fixed(method, self.dt_subproblem)
        }
    }

    pub fn gd(&self, method: Method) -> GdConfig<f64> {
        GdConfig { eta: self.eta, grad_tol: self.grad_tol, max_iters: self.max_iters, ..GdConfig::new(self.integrator(method)) }
    }

    fn options(&self) -> SchwarzOptions {
        let first = ControlInit::Normal { seed: self.seed };
        SchwarzOptions { parallel: self.parallel, first, later: if self.cold_start { first } else { ControlInit::Warm } }
    }
}

/// One line of `report.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    /// Bound or admissible range, as printed.
    pub bound: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, measured: f64, bound: impl fmt::Display) -> Self {
        Check { name: name.into(), pass, measured, bound: bound.to_string() }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CHECK {} {} {:.6e} {}", self.name, if self.pass { "PASS" } else { "FAIL" }, self.measured, self.bound)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    /// Overlap in percent or integrator name.
    pub series: String,
    pub k: usize,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateRow {
    pub series: String,
    /// Requested overlap fraction.
    pub overlap: f64,
    /// Snapped overlap in time units.
    pub tau: f64,
    pub mean_rate: Option<f64>,
    pub theoretical_bound: Option<f64>,
    /// Last error of the run.
    pub final_error: f64,
    pub unconverged_solves: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitRow {
    /// Unit of τ used in the fit.
    pub tau_unit: &'static str,
    pub c_hat: f64,
    pub rho_hat: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentOutput {
    pub errors: Vec<ErrorRow>,
    pub rates: Vec<RateRow>,
    pub fits: Vec<FitRow>,
    pub constants: Vec<(String, f64)>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl ExperimentOutput {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::OverlapSweep => overlap_sweep(cfg),
        Experiment::IntegratorCompare => integrator_compare(cfg),
        Experiment::StiffCompare => stiff_compare(cfg),
        Experiment::EdsBoundary => eds_boundary(cfg),
        Experiment::EdsPoint => eds_point(cfg),
        Experiment::ConstantsReport => constants_report(cfg),
        Experiment::UccReport => ucc_report(cfg),
    }
}

fn percent_label(fraction: f64) -> String {
    format!("{}%", (fraction * 1e4).round() / 100.0)
}

/// Assumption report, UCC scan and constants; `None` when the pair is not
/// uniformly controllable on windows of length `sigma`.
pub fn problem_constants(
    problem: &LqProblem<f64>,
    sigma: f64,
    dt: f64,
) -> Result<(AssumptionReport<f64>, UccReport<f64>, Option<ConstantsBundle<f64>>)> {
    let horizon = problem.horizon();
    let samples = ((horizon / dt).round() as usize).clamp(50, 2000);
    let report = validate_assumptions(problem, samples)?;
    let sigma = sigma.min(0.5 * horizon);
    let ucc = check_ucc(&problem.a, &problem.b, sigma, horizon, 50, default_panels(0.0, sigma, dt))?;
    let constants = if ucc.pass { theoretical_constants(&report, &ucc, sigma).ok() } else { None };
    Ok((report, ucc, constants))
}

struct SchwarzRun {
    series: String,
    fraction: f64,
    report: ConvergenceReport,
}

fn schwarz_run(
    cfg: &ExperimentConfig,
    problem: &LqProblem<f64>,
    reference: &Solution<f64>,
    fraction: f64,
    method: Method,
    series: String,
) -> Result<SchwarzRun> {
    let grid = TimeGrid::with_step(0.0, problem.horizon(), cfg.dt_subproblem)?;
    let layout = Layout::new(&build_partition(problem.horizon(), cfg.m, fraction)?, &grid)?;
    let run = RunConfig { max_outer: cfg.max_outer, stop_tol: cfg.stop_tol, opts: cfg.options() };
    let init = SchwarzIterate::initial(problem, &grid);
    let (_, report) = run_schwarz(problem, &layout, init, &cfg.gd(method), &run, Some(reference))?;
    Ok(SchwarzRun { series, fraction, report })
}

fn push_errors(out: &mut ExperimentOutput, run: &SchwarzRun) {
    if let Some(e0) = run.report.initial_error {
        out.errors.push(ErrorRow { series: run.series.clone(), k: 0, error: e0 });
    }
    for (i, &e) in run.report.errors.iter().enumerate() {
        out.errors.push(ErrorRow { series: run.series.clone(), k: i + 1, error: e });
    }
}

fn rate_row(run: &SchwarzRun, constants: Option<&ConstantsBundle<f64>>) -> RateRow {
    RateRow {
        series: run.series.clone(),
        overlap: run.fraction,
        tau: run.report.tau,
        mean_rate: run.report.mean_rate,
        theoretical_bound: constants.map(|c| c.schwarz_rate_bound(run.report.tau)),
        final_error: run.report.errors.last().copied().unwrap_or(f64::NAN),
        unconverged_solves: run.report.unconverged_solves,
    }
}

fn unconverged_note(out: &mut ExperimentOutput, runs: &[SchwarzRun]) {
    for r in runs {
        if r.report.unconverged_solves > 0 {
            out.notes.push(format!(
                "{}: {} subproblem solves stopped at the iteration budget",
                r.series, r.report.unconverged_solves
            ));
        }
    }
}

/// Pre-plateau ratios of an error history, as used by the rate estimate.
pub fn pre_plateau_ratios(errors: &[f64], floor: f64) -> Vec<f64> {
    let floor = floor.max(NOISE_FLOOR);
    let end = plateau_start(errors);
    errors[..end].windows(2).filter(|w| w[0] > floor && w[1] > floor).map(|w| w[1] / w[0]).collect()
}

fn rate_bound_checks(out: &mut ExperimentOutput, rows: &[RateRow]) {
    let mut applicable = false;
    for r in rows {
        if let (Some(bound), Some(rate)) = (r.theoretical_bound, r.mean_rate) {
            if bound < 1.0 {
                applicable = true;
                out.checks.push(Check::new(format!("rate_bound[{}]", r.series), rate <= bound, rate, bound));
            }
        }
    }
    if !applicable {
        let smallest = rows.iter().filter_map(|r| r.theoretical_bound).fold(f64::INFINITY, f64::min);
        out.notes.push(format!(
            "contraction bound 3 c(sigma) exp(-rho_Z tau) is {:.3e} at best (>= 1); the rate comparison is vacuous",
            smallest
        ));
        out.checks.push(Check::new("rate_bound", true, smallest, "vacuous(bound>=1)"));
    }
}

/// Relative difference below which two mean rates are considered equal.
pub const RATE_RESOLUTION: f64 = 1e-3;

fn overlap_sweep(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let problem = cfg.build_problem()?;
    let fine = TimeGrid::with_step(0.0, problem.horizon(), cfg.dt_reference)?;
    let reference = solve_full_direct(&problem, &fine)?.solution;
    let (_, _, constants) = problem_constants(&problem, cfg.sigma, cfg.dt_reference)?;
    let method = cfg.integrators[0];
    let mut fractions = cfg.overlaps.clone();
    fractions.sort_by(f64::total_cmp);
    let mut out = ExperimentOutput::default();
    let runs = fractions
        .iter()
        .map(|&f| schwarz_run(cfg, &problem, &reference, f, method, percent_label(f)))
        .collect::<Result<Vec<_>>>()?;
    for run in &runs {
        push_errors(&mut out, run);
        let row = rate_row(run, constants.as_ref());
        let ratios = pre_plateau_ratios(&run.report.errors, 100.0 * cfg.stop_tol);
        let worst = ratios.iter().cloned().fold(f64::NAN, f64::max);
        out.checks.push(Check::new(
            format!("log_linear_decay[{}]", run.series),
            !ratios.is_empty() && worst < 1.0,
            worst,
            "<1",
        ));
        out.rates.push(row);
    }
    let rates: Vec<f64> = out.rates.iter().map(|r| r.mean_rate.unwrap_or(f64::NAN)).collect();
    // relative change between neighbouring overlaps; ties count as failures
    let worst_step = rates.windows(2).map(|w| (w[1] - w[0]) / w[0]).fold(f64::NEG_INFINITY, f64::max);
    out.checks.push(Check::new(
        "rates_strictly_decreasing",
        rates.len() >= 2 && rates.iter().all(|r| r.is_finite()) && worst_step < -RATE_RESOLUTION,
        worst_step,
        format!("<-{}", RATE_RESOLUTION),
    ));

    let points = |scale: fn(&RateRow) -> f64| -> Vec<(f64, f64)> {
        out.rates.iter().filter_map(|r| r.mean_rate.map(|m| (scale(r), m))).collect()
    };
    let fits = [
        ("percent", points(|r| 100.0 * r.overlap)),
        ("fraction", points(|r| r.overlap)),
        ("time", points(|r| r.tau)),
    ];
    for (unit, pts) in fits {
        match fit_exponential(&pts) {
            Ok((c_hat, rho_hat)) => out.fits.push(FitRow { tau_unit: unit, c_hat, rho_hat }),
            Err(e) => out.notes.push(format!("fit with tau in {} units: {}", unit, e)),
        }
    }
    let pct = out.fits.iter().find(|f| f.tau_unit == "percent").cloned();
    let (c_hat, rho_hat) = pct.map_or((f64::NAN, f64::NAN), |f| (f.c_hat, f.rho_hat));
    out.checks.push(Check::new("fit_c_hat", (0.85..=1.05).contains(&c_hat), c_hat, "[0.85,1.05]"));
    out.checks.push(Check::new("fit_rho_hat", (0.03..=0.08).contains(&rho_hat), rho_hat, "[0.03,0.08]"));
    let rows = out.rates.clone();
    rate_bound_checks(&mut out, &rows);
    if let Some(c) = &constants {
        out.constants = c.rows().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    }
    unconverged_note(&mut out, &runs);
    Ok(out)
}

fn integrator_runs(cfg: &ExperimentConfig) -> Result<(ExperimentOutput, Vec<SchwarzRun>)> {
    let problem = cfg.build_problem()?;
    let fine = TimeGrid::with_step(0.0, problem.horizon(), cfg.dt_reference)?;
    let reference = solve_full_direct(&problem, &fine)?.solution;
    let fraction = cfg.overlaps[0];
    let mut out = ExperimentOutput::default();
    let runs = cfg
        .integrators
        .iter()
        .map(|&m| schwarz_run(cfg, &problem, &reference, fraction, m, m.name().to_string()))
        .collect::<Result<Vec<_>>>()?;
    for run in &runs {
        push_errors(&mut out, run);
        out.rates.push(rate_row(run, None));
    }
    unconverged_note(&mut out, &runs);
    Ok((out, runs))
}

/// Required separation between consecutive integrators' converged errors.
pub const SEPARATION: f64 = 2.0;

fn integrator_compare(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (mut out, _) = integrator_runs(cfg)?;
    // listed from least to most accurate
    for w in out.rates.clone().windows(2) {
        let ratio = w[0].final_error / w[1].final_error;
        out.checks.push(Check::new(
            format!("error_ratio[{}/{}]", w[0].series, w[1].series),
            ratio >= SEPARATION,
            ratio,
            format!(">={}", SEPARATION),
        ));
    }
    Ok(out)
}

/// Relative slack when asking an error history not to increase.
pub const MONOTONE_RTOL: f64 = 1e-6;

fn stiff_compare(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (mut out, runs) = integrator_runs(cfg)?;
    for run in &runs {
        let e = &run.report.errors;
        let first = e[0];
        if e.iter().any(|v| !v.is_finite()) {
            out.checks.push(Check::new(format!("diverged[{}]", run.series), true, f64::INFINITY, "n/a"));
            continue;
        }
        if run.series == Method::ForwardEuler.name() {
            // never improves on its first iterate
            let best = e[1..].iter().cloned().fold(f64::INFINITY, f64::min) / first;
            out.checks.push(Check::new(format!("no_reduction[{}]", run.series), best >= 1.0 - MONOTONE_RTOL, best, ">=1"));
        } else {
            let worst = e.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
            out.checks.push(Check::new(
                format!("monotone_decrease[{}]", run.series),
                worst <= 1.0 + MONOTONE_RTOL && e[e.len() - 1] < first,
                worst,
                format!("<={}", 1.0 + MONOTONE_RTOL),
            ));
        }
    }
    Ok(out)
}

fn sensitivity_setup(
    cfg: &ExperimentConfig,
) -> Result<(LqProblem<f64>, TimeGrid<f64>, IntegratorConfig<f64>, ConstantsBundle<f64>, ExperimentOutput)> {
    let problem = cfg.build_problem()?;
    let grid = TimeGrid::with_step(0.0, problem.horizon(), cfg.dt_reference)?;
    let ric_cfg = IntegratorConfig::fixed(Method::Rk4, cfg.dt_reference);
    let (report, _, constants) = problem_constants(&problem, cfg.sigma, cfg.dt_reference)?;
    let constants = constants.ok_or_else(|| Error::NotControllable(format!("UCC fails for sigma = {}", cfg.sigma)))?;
    let mut out = ExperimentOutput::default();
    out.constants = constants.rows().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    if !report.pass {
        out.notes.push("assumption check failed: constants are not certified for this problem".into());
    }
    Ok((problem, grid, ric_cfg, constants, out))
}

fn normal_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn envelope_checks(out: &mut ExperimentOutput, tag: &str, env: &EnvelopeReport<f64>, both_sides: bool) {
    out.checks.push(Check::new(format!("{}_envelope", tag), env.pass, env.max_ratio, "<=1"));
    let sides: &[(&str, Option<f64>)] = if both_sides {
        &[("before", env.slope_before), ("after", env.slope_after)]
    } else {
        &[("after", env.slope_after)]
    };
    for &(side, slope) in sides {
        let s = slope.unwrap_or(f64::NAN);
        out.checks.push(Check::new(format!("{}_slope_{}", tag, side), s < 0.0, s, "<0"));
    }
}

fn eds_boundary(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (problem, grid, ric_cfg, constants, mut out) = sensitivity_setup(cfg)?;
    let mut rng = substream(cfg.seed, 0, 0);
    let l0 = normal_vector(&mut rng, problem.nx());
    let l_t = normal_vector(&mut rng, problem.nd());
    let resp = boundary_perturbation_response(&problem, &l0, &l_t, &grid, &constants, &ric_cfg)?;
    for (i, &t) in grid.nodes().iter().enumerate() {
        out.errors.push(ErrorRow { series: format!("t={}", t), k: i, error: resp.magnitude(i) });
    }
    envelope_checks(&mut out, "boundary", &resp.envelope, false);
    Ok(out)
}

fn eds_point(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (problem, grid, ric_cfg, constants, mut out) = sensitivity_setup(cfg)?;
    if problem.nd() == 0 {
        return Err(Error::InvalidArgument(format!("problem '{}' has no parameter to perturb", cfg.problem)));
    }
    let ric = solve_riccati_full(&problem, &grid, &ric_cfg)?;
    let mut rng = substream(cfg.seed, 0, 0);
    let horizon = problem.horizon();
    for frac in [0.25, 0.5, 0.75] {
        let l = normal_vector(&mut rng, problem.nd());
        let tp = frac * horizon;
        let resp = point_perturbation_response(&problem, &ric, tp, &l, &constants, &ric_cfg)?;
        for i in 0..grid.len() {
            out.errors.push(ErrorRow { series: format!("t'={}", tp), k: i, error: resp.magnitude(i) });
        }
        envelope_checks(&mut out, &format!("point[t'={}]", tp), &resp.envelope, true);
    }
    Ok(out)
}

fn constants_report(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (problem, grid, ric_cfg, constants, mut out) = sensitivity_setup(cfg)?;
    let ric = solve_riccati_full(&problem, &grid, &ric_cfg)?;
    let (lo, hi) = ric.eig_range();
    out.checks.push(Check::new("riccati_eig_lower", lo >= constants.c0, lo, format!(">={:.6e}", constants.c0)));
    out.checks.push(Check::new("riccati_eig_upper", hi <= constants.c1, hi, format!("<={:.6e}", constants.c1)));

    let mut rng = substream(cfg.seed, 0, 0);
    let horizon = problem.horizon();
    let pairs: Vec<(f64, f64)> = (0..50)
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..horizon);
            let b: f64 = rng.gen_range(0.0..horizon);
            (a.min(b), a.max(b))
        })
        .collect();
    let decay = evolution_decay_check(&problem, &ric, &pairs, &constants)?;
    let worst = decay.entries.iter().map(|e| e.2 / e.3).fold(0.0, f64::max);
    out.checks.push(Check::new("closed_loop_decay", decay.pass, worst, "<=1"));

    // contraction bound against measured Schwarz rates
    let fine = TimeGrid::with_step(0.0, horizon, cfg.dt_reference)?;
    let reference = crate::reference::solve_full_riccati(&problem, &fine, &ric_cfg)?;
    let mut rows = Vec::new();
    for &f in &cfg.overlaps {
        let grid = TimeGrid::with_step(0.0, horizon, cfg.dt_subproblem)?;
        let layout = Layout::new(&build_partition(horizon, cfg.m, f)?, &grid)?;
        let tau = layout.partition.min_overlap();
        let bound = constants.schwarz_rate_bound(tau);
        let run = schwarz_run(cfg, &problem, &reference, f, cfg.integrators[0], percent_label(f))?;
        push_errors(&mut out, &run);
        rows.push(RateRow { theoretical_bound: Some(bound), tau, ..rate_row(&run, None) });
    }
    rate_bound_checks(&mut out, &rows);
    out.rates = rows;
    Ok(out)
}

fn ucc_report(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let problem = cfg.build_problem()?;
    let mut out = ExperimentOutput::default();
    let horizon = problem.horizon();
    for sigma in [0.5 * cfg.sigma, cfg.sigma, 2.0 * cfg.sigma] {
        if !(sigma < horizon) {
            out.notes.push(format!("sigma = {} skipped (not below the horizon)", sigma));
            continue;
        }
        let ucc = check_ucc(&problem.a, &problem.b, sigma, horizon, 50, default_panels(0.0, sigma, cfg.dt_reference))?;
        for (k, v) in [("alpha0", ucc.alpha0), ("alpha1", ucc.alpha1), ("beta0", ucc.beta0), ("beta1", ucc.beta1)] {
            out.constants.push((format!("{}[sigma={}]", k, sigma), v));
        }
        out.checks.push(Check::new(format!("ucc_alpha0[sigma={}]", sigma), ucc.alpha0 > 0.0, ucc.alpha0, ">0"));
        out.checks.push(Check::new(format!("ucc_beta0[sigma={}]", sigma), ucc.beta0 > 0.0, ucc.beta0, ">0"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        let err = "nope".parse::<Experiment>().unwrap_err().to_string();
        assert!(err.contains("overlap_sweep") && err.contains("ucc_report"));
    }

    #[test]
    fn presets_validate() {
        for e in Experiment::ALL {
            ExperimentConfig::preset(e).validate().unwrap();
        }
        let mut c = ExperimentConfig::preset(Experiment::OverlapSweep);
        c.dt_subproblem = 0.0;
        assert!(c.validate().is_err());
        c = ExperimentConfig::preset(Experiment::OverlapSweep);
        c.problem = "unknown".into();
        assert!(c.validate().unwrap_err().to_string().contains("linearized_two_state"));
    }

    #[test]
    fn check_line_format() {
        let c = Check::new("x", false, 0.5, "<1");
        assert_eq!(c.to_string(), "CHECK x FAIL 5.000000e-1 <1");
    }

    #[test]
    fn ucc_report_on_margin_problem() {
        let out = run_experiment(&ExperimentConfig::preset(Experiment::UccReport)).unwrap();
        assert!(out.all_pass());
        assert_eq!(out.constants.len(), 12);
    }

    #[test]
    fn small_sweep_runs() {
        let cfg = ExperimentConfig {
            dt_subproblem: 0.01,
            overlaps: vec![0.1, 0.5],
            grad_tol: 1e-5,
            max_outer: 6,
            parallel: false,
            integrators: vec![Method::Rk4],
            ..ExperimentConfig::preset(Experiment::OverlapSweep)
        };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.rates.len(), 2);
        assert_eq!(out.errors.len(), 2 * 7);
        assert!(out.check("rates_strictly_decreasing").is_some());
        assert!(out.fits.iter().any(|f| f.tau_unit == "percent"), "{:?} {:?}", out.rates, out.errors);
    }
}
