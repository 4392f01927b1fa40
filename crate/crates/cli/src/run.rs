//! The `solve`, `verify`, `simulate` and `sweep` commands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mfgc::domain::{GridDomain, ScalarField};
use mfgc::fp::{flux_residual, verify_density_asymptotics, weak_solution_residual};
use mfgc::hjb::{solve_ergodic, verify_asymptotics, AsymptoticsReport, DiscountSchedule, HJBSolution};
use mfgc::mfgc::{cost_identity, solve_equilibrium, EquilibriumState};
use mfgc::model::{certify_assumptions, default_samples, HamiltonianModel};
use mfgc::sde::{compare_invariant_density, estimate_rho, simulate_paths, PathEnsemble};
use rayon::prelude::*;
use thiserror::Error;
use toml::Value;

use crate::config::{ConfigError, RunConfig, SweepAxis};
use crate::output::{num, write_asymptotics, write_equilibrium, RunDir, Table};
use crate::svg::{Plot, Series};

pub const OUT_DIR_ENV: &str = "MFGC_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write outputs: {0}")]
    Io(#[from] std::io::Error),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Io(_) => 1,
            Self::Solver(_) => 2,
            Self::Verification(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub verbose: bool,
}

impl Flags {
    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| cfg.outputs.directory.clone())
    }

    fn log(&self, msg: impl FnOnce() -> String) {
        if self.verbose {
            eprintln!("{}", msg());
        }
    }
}

fn table(entries: Vec<(&str, Value)>) -> toml::Table {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn f(v: f64) -> Value {
    Value::Float(v)
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

/// Solves the configured equilibrium and writes its bundle. Failures write a
/// diagnostics file and a manifest before returning.
fn solve_into(cfg: &RunConfig, dir: &RunDir, flags: &Flags) -> Result<(HamiltonianModel, EquilibriumState), CliError> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    flags.log(|| format!("solving on {} nodes, q = {}, C0 = {:.4}", grid.len(), model.q(), model.c0()));
    match solve_equilibrium(&model, &cfg.model.source, &grid, &cfg.solver, None) {
        Ok(eq) => {
            flags.log(|| format!("converged after {} outer iterations, rho = {}", eq.outer_iterations, eq.rho));
            write_equilibrium(dir, &model, &eq)?;
            Ok((model, eq))
        }
        Err(e) => {
            let msg = e.to_string();
            dir.text("diagnostics.txt", &format!("{e:#?}\n"))?;
            dir.manifest(cfg, table(vec![("status", Value::String("solver_failure".into())), ("error", Value::String(msg.clone()))]))?;
            Err(CliError::Solver(msg))
        }
    }
}

fn equilibrium_results(model: &HamiltonianModel, eq: &EquilibriumState) -> Vec<(&'static str, Value)> {
    let cost = cost_identity(eq, model);
    let mut out = vec![
        ("rho", f(eq.rho)),
        ("outer_iterations", int(eq.outer_iterations)),
        ("lambda_q_conj", f(eq.lambda(model))),
        ("mean_control", f(eq.mu.mean_control()[0])),
        ("hjb_residual", f(eq.residuals.hjb)),
        ("flux_residual", f(eq.residuals.flux)),
        ("pushforward_residual", f(eq.residuals.pushforward)),
        ("cost_identity_gap", f(cost.gap)),
        ("apriori_bound", f(eq.apriori_bound)),
        ("projection_triggers", int(eq.projection_triggers)),
        ("moment_bound_holds", Value::Boolean(eq.moment_checks.iter().all(|c| c.holds))),
    ];
    if let Some(g) = eq.homotopy_gap {
        out.push(("homotopy_direct_gap", f(g)));
    }
    out
}

pub fn cmd_solve(cfg: &RunConfig, flags: &Flags) -> Result<PathBuf, CliError> {
    let out = flags.out_dir(cfg);
    let dir = RunDir::create(&out, cfg)?;
    let (model, eq) = solve_into(cfg, &dir, flags)?;
    let mut res = vec![("command", Value::String("solve".into())), ("status", Value::String("converged".into()))];
    res.extend(equilibrium_results(&model, &eq));
    dir.manifest(cfg, table(res))?;
    Ok(out)
}

#[derive(Debug, Clone)]
struct CheckLine {
    name: String,
    passed: bool,
    value: f64,
    threshold: f64,
    detail: String,
}

impl CheckLine {
    fn new(name: impl Into<String>, passed: bool, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, value, threshold, detail: detail.into() }
    }
}

/// HJB solve on another grid with the equilibrium measure frozen.
fn frozen_hjb(
    cfg: &RunConfig,
    model: &HamiltonianModel,
    eq: &EquilibriumState,
    n_nodes: usize,
    plain: bool,
) -> Result<HJBSolution, CliError> {
    let mut c = cfg.clone();
    c.domain.n_nodes = n_nodes;
    let grid: Arc<GridDomain> = c.grid()?;
    let f = cfg.model.source.eval(&eq.mu, &grid);
    let mut opts = cfg.solver.hjb.clone();
    opts.singular_subtraction = !plain && opts.singular_subtraction;
    solve_ergodic(model, &eq.mu, &f, &cfg.solver.boundary, &DiscountSchedule::default_homotopy(), &opts, None)
        .map_err(|e| CliError::Solver(format!("HJB solve on {n_nodes} nodes: {e}")))
}

fn asymptotics(cfg: &RunConfig, model: &HamiltonianModel, eq: &EquilibriumState) -> Result<AsymptoticsReport, CliError> {
    let n = cfg.domain.n_nodes;
    let plain = cfg.verify.plain_hjb;
    let fine = if plain { frozen_hjb(cfg, model, eq, n, true)? } else { eq.hjb.clone() };
    let mut refinements = Vec::new();
    for &k in &cfg.verify.coarsening {
        if k < 2 || n / k < 16 {
            return Err(ConfigError::Invalid(format!("verify.coarsening factor {k} is invalid for {n} nodes")).into());
        }
        refinements.push(frozen_hjb(cfg, model, eq, n / k, plain)?);
    }
    Ok(verify_asymptotics(&fine, model, &eq.mu, &refinements))
}

pub fn cmd_verify(cfg: &RunConfig, flags: &Flags) -> Result<PathBuf, CliError> {
    let out = flags.out_dir(cfg);
    let dir = RunDir::create(&out, cfg)?;
    let model = cfg.model()?;
    let mut checks = Vec::new();

    let (mus, pts) = default_samples();
    let cert = certify_assumptions(&model, &mus, &pts).map_err(ConfigError::from)?;
    for c in &cert.checks {
        checks.push(CheckLine::new(
            format!("certification/{}", c.name),
            c.passed,
            c.margin,
            0.0,
            c.witness.clone().unwrap_or_default(),
        ));
    }
    if !cert.passed() {
        flags.log(|| "certification failed; equilibrium checks skipped".into());
    }
    let mut results = vec![("command", Value::String("verify".into()))];

    if cert.passed() {
        let (model, eq) = solve_into(cfg, &dir, flags)?;
        results.extend(equilibrium_results(&model, &eq));
        let rep = asymptotics(cfg, &model, &eq)?;
        write_asymptotics(&dir, &rep)?;
        let v = &rep.value_fit;
        let g = &rep.gradient_fit;
        checks.push(CheckLine::new("asymptotics/value_exponent", v.exponent_ok, v.exponent, v.expected_exponent, if v.log_mode { "logarithmic profile" } else { "" }));
        checks.push(CheckLine::new("asymptotics/value_coefficient", v.coefficient_ok, v.coefficient, v.expected_coefficient, ""));
        checks.push(CheckLine::new("asymptotics/gradient_exponent", g.exponent_ok, g.exponent, g.expected_exponent, ""));
        checks.push(CheckLine::new("asymptotics/gradient_coefficient", g.coefficient_ok, g.coefficient, g.expected_coefficient, ""));
        checks.push(CheckLine::new("asymptotics/second_derivative", rep.second_derivative_ok, rep.second_derivative_ratio, 1.0, ""));
        if let Some(b) = &rep.gradient_bound {
            checks.push(CheckLine::new("asymptotics/gradient_bound_spread", b.passed, b.spread, mfgc::hjb::GRADIENT_BOUND_TOL, ""));
        }
        checks.push(CheckLine::new(
            "asymptotics/correction_decay",
            rep.correction.passed,
            rep.correction.outer_ratio,
            rep.correction.inner_ratio,
            format!("{:?}", rep.correction.case),
        ));

        let dens = verify_density_asymptotics(&eq.m, &model);
        checks.push(CheckLine::new("density/exponent", dens.passed, dens.exponent, dens.expected_exponent, ""));

        let flux = flux_residual(&eq.m, &eq.drift, model.sigma());
        checks.push(CheckLine::new("density/flux_residual", flux.relative <= 1e-6, flux.relative, 1e-6, ""));

        let grid = eq.u.grid().clone();
        let (a, len) = (grid.a(), grid.length());
        let tests: Vec<ScalarField> = (1..=3)
            .map(|k| ScalarField::from_fn(grid.clone(), move |x| (k as f64 * std::f64::consts::PI * (x - a) / len).sin()))
            .collect();
        let weak = weak_solution_residual(&eq.m, &eq.drift, model.sigma(), &tests, cfg.verify.weak_exclude_below);
        checks.push(CheckLine::new("density/weak_residual", weak <= cfg.verify.weak_tolerance, weak, cfg.verify.weak_tolerance, ""));

        let cost = cost_identity(&eq, &model);
        checks.push(CheckLine::new("equilibrium/cost_identity", cost.passed, cost.gap, mfgc::mfgc::COST_IDENTITY_TOL * (1.0 + eq.rho.abs()), ""));
        let worst = eq.moment_checks.iter().map(|c| c.lambda_pow - c.bound).fold(f64::NEG_INFINITY, f64::max);
        checks.push(CheckLine::new("equilibrium/moment_bound", eq.moment_checks.iter().all(|c| c.holds), worst, 0.0, "max of Lambda^q' minus bound"));
    }

    let mut t = Table::new(
        "check: name; passed: flag; value: observed quantity; threshold: reference value or tolerance; detail: witness or note",
        vec!["check", "passed", "value", "threshold", "detail"],
    );
    for c in &checks {
        t.push(vec![c.name.clone(), c.passed.to_string(), num(c.value), num(c.threshold), csv_text(&c.detail)]);
    }
    dir.table("verify_report.csv", &t)?;

    let failed: Vec<&CheckLine> = checks.iter().filter(|c| !c.passed).collect();
    results.push(("passed", Value::Boolean(failed.is_empty())));
    results.push(("failed_checks", Value::Array(failed.iter().map(|c| Value::String(c.name.clone())).collect())));
    dir.manifest(cfg, table(results))?;
    if failed.is_empty() {
        Ok(out)
    } else {
        let names: Vec<String> = failed
            .iter()
            .map(|c| if c.detail.is_empty() { c.name.clone() } else { format!("{} ({})", c.name, c.detail) })
            .collect();
        Err(CliError::Verification(names.join("; ")))
    }
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

fn write_ensemble(dir: &RunDir, ens: &PathEnsemble, eq: &EquilibriumState) -> std::io::Result<()> {
    let mut paths = Table::new(
        "path: index; exited: left the interval or collapsed; exit_time, exit_position: event data; time_avg_cost: running cost averaged after burn-in; steps: accepted steps; min_distance: closest approach to the boundary",
        vec!["path", "exited", "exit_time", "exit_position", "time_avg_cost", "steps", "min_distance"],
    );
    for (k, p) in ens.paths.iter().enumerate() {
        paths.push(vec![
            k.to_string(),
            p.exited.to_string(),
            p.exit_time.map(num).unwrap_or_default(),
            p.exit_position.map(num).unwrap_or_default(),
            num(p.time_avg_cost),
            p.steps.to_string(),
            num(p.min_distance),
        ]);
    }
    dir.table("paths.csv", &paths)?;

    let pde = bin_masses(eq, &ens.bin_edges);
    let total: f64 = ens.occupation.iter().sum();
    let mut hist = Table::new(
        "bin_lo, bin_hi: bin edges; empirical: occupation fraction of the ensemble; pde: mass of the invariant density",
        vec!["bin_lo", "bin_hi", "empirical", "pde"],
    );
    let mut emp_pts = Vec::new();
    let mut pde_pts = Vec::new();
    for k in 0..ens.occupation.len() {
        let (lo, hi) = (ens.bin_edges[k], ens.bin_edges[k + 1]);
        let e = if total > 0.0 { ens.occupation[k] / total } else { 0.0 };
        hist.push(vec![num(lo), num(hi), num(e), num(pde[k])]);
        emp_pts.push((0.5 * (lo + hi), e / (hi - lo)));
        pde_pts.push((0.5 * (lo + hi), pde[k] / (hi - lo)));
    }
    dir.table("occupation.csv", &hist)?;
    dir.plot(
        "occupation.svg",
        &Plot::new("occupation density against the invariant density", "x", "density")
            .with(Series::new("Monte Carlo", emp_pts))
            .with(Series::new("invariant density", pde_pts).dashed()),
    )
}

/// Mass of `m` in each bin, with the excluded mass split between the end bins.
fn bin_masses(eq: &EquilibriumState, edges: &[f64]) -> Vec<f64> {
    let g = eq.m.grid();
    let x = g.nodes();
    let m = eq.m.density();
    let mut cdf = vec![0.0; x.len()];
    for i in 1..x.len() {
        cdf[i] = cdf[i - 1] + 0.5 * (m[i] + m[i - 1]) * (x[i] - x[i - 1]);
    }
    let c = |t: f64| g.interpolate(&cdf, t.clamp(x[0], x[x.len() - 1]));
    let nb = edges.len() - 1;
    let mut out: Vec<f64> = (0..nb).map(|k| c(edges[k + 1]) - c(edges[k])).collect();
    if nb > 0 {
        let half = 0.5 * eq.m.excluded_mass();
        out[0] += half;
        out[nb - 1] += half;
    }
    out
}

pub fn cmd_simulate(cfg: &RunConfig, flags: &Flags) -> Result<PathBuf, CliError> {
    let sim = cfg.simulation()?;
    let out = flags.out_dir(cfg);
    let dir = RunDir::create(&out, cfg)?;
    let (model, eq) = solve_into(cfg, &dir, flags)?;
    flags.log(|| format!("simulating {} paths to T = {}", sim.n_paths, sim.horizon));
    let ens = simulate_paths(&eq, &model, &sim).map_err(|e| CliError::Config(e.into()))?;
    write_ensemble(&dir, &ens, &eq)?;
    let (rho_mc, se) = estimate_rho(&ens);
    let l1 = compare_invariant_density(&ens, &eq.m);
    let exits = ens.exits();
    let within = (rho_mc - eq.rho).abs() <= 3.0 * se;

    let mut t = Table::new(
        "rho_pde: ergodic constant of the PDE; rho_mc: Monte Carlo mean of time-averaged cost; stderr: its standard error; z: (rho_mc - rho_pde)/stderr",
        vec!["rho_pde", "rho_mc", "stderr", "z", "exits", "occupation_l1"],
    );
    let z = (rho_mc - eq.rho) / se;
    t.push(vec![num(eq.rho), num(rho_mc), num(se), num(z), exits.to_string(), num(l1)]);
    dir.table("rho_comparison.csv", &t)?;
    println!("rho_pde = {}  rho_mc = {}  stderr = {}  exits = {}", eq.rho, rho_mc, se, exits);

    let mut res = vec![("command", Value::String("simulate".into()))];
    res.extend(equilibrium_results(&model, &eq));
    res.extend([
        ("rho_mc", f(rho_mc)),
        ("rho_mc_stderr", f(se)),
        ("exits", int(exits)),
        ("occupation_l1", f(l1)),
        ("within_three_stderr", Value::Boolean(within)),
    ]);
    dir.manifest(cfg, table(res))?;
    if exits > 0 {
        return Err(CliError::Solver(format!("{exits} paths collapsed at the boundary")));
    }
    if !within {
        return Err(CliError::Verification(format!(
            "Monte Carlo rho {rho_mc} differs from PDE rho {} by more than 3 standard errors ({se})",
            eq.rho
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct SweepPoint {
    value: f64,
    outcome: Result<PointSummary, String>,
}

#[derive(Debug, Clone)]
struct PointSummary {
    rho: f64,
    lambda: f64,
    outer_iterations: usize,
    u_exponent: f64,
    u_expected: f64,
    grad_exponent: f64,
    density_exponent: f64,
}

fn run_point(cfg: &RunConfig, axis: SweepAxis, value: f64, dir: &Path, flags: &Flags) -> Result<PointSummary, String> {
    let pc = cfg.at_sweep_point(axis, value).map_err(|e| e.to_string())?;
    let rd = RunDir::create(dir, &pc).map_err(|e| e.to_string())?;
    let (model, eq) = solve_into(&pc, &rd, flags).map_err(|e| e.to_string())?;
    let rep = verify_asymptotics(&eq.hjb, &model, &eq.mu, &[]);
    write_asymptotics(&rd, &rep).map_err(|e| e.to_string())?;
    let dens = verify_density_asymptotics(&eq.m, &model);
    let mut res = vec![("command", Value::String("sweep".into())), ("status", Value::String("converged".into()))];
    res.extend(equilibrium_results(&model, &eq));
    rd.manifest(&pc, table(res)).map_err(|e| e.to_string())?;
    Ok(PointSummary {
        rho: eq.rho,
        lambda: eq.lambda(&model),
        outer_iterations: eq.outer_iterations,
        u_exponent: rep.value_fit.exponent,
        u_expected: rep.value_fit.expected_exponent,
        grad_exponent: rep.gradient_fit.exponent,
        density_exponent: dens.exponent,
    })
}

/// Observed orders `ln(|e_k| / |e_{k+1}|) / ln(n_{k+1} / n_k)` from successive differences.
pub fn richardson_orders(ns: &[f64], values: &[f64]) -> Vec<f64> {
    let diffs: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    (0..diffs.len().saturating_sub(1))
        .map(|k| (diffs[k] / diffs[k + 1]).ln() / (ns[k + 1] / ns[k]).ln())
        .collect()
}

pub fn cmd_sweep(cfg: &RunConfig, flags: &Flags) -> Result<PathBuf, CliError> {
    let sweep = cfg.sweep_block()?.clone();
    for &v in &sweep.values {
        cfg.at_sweep_point(sweep.axis, v)?;
    }
    let out = flags.out_dir(cfg);
    let dir = RunDir::create(&out, cfg)?;
    let workers = flags.workers.or(sweep.workers).unwrap_or_else(rayon::current_num_threads).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Solver(format!("cannot start worker pool: {e}")))?;
    let points: Vec<SweepPoint> = pool.install(|| {
        sweep
            .values
            .par_iter()
            .enumerate()
            .map(|(k, &value)| {
                let sub = out.join(format!("point_{k:03}"));
                SweepPoint { value, outcome: run_point(cfg, sweep.axis, value, &sub, flags) }
            })
            .collect()
    });

    let axis_name = match sweep.axis {
        SweepAxis::Q => "q",
        SweepAxis::NNodes => "n_nodes",
        SweepAxis::Coupling => "coupling",
    };
    let mut t = Table::new(
        "axis, value: sweep coordinate; status: ok or failed; rho: ergodic constant; lambda_q_conj: control moment; outer_iterations; u_exponent, u_expected: fitted and predicted boundary exponent of u (0 marks a logarithmic profile); grad_exponent: fitted exponent of u'; density_exponent: fitted exponent of m; error: failure message",
        vec!["axis", "value", "status", "rho", "lambda_q_conj", "outer_iterations", "u_exponent", "u_expected", "grad_exponent", "density_exponent", "error"],
    );
    for p in &points {
        match &p.outcome {
            Ok(s) => t.push(vec![
                axis_name.into(),
                num(p.value),
                "ok".into(),
                num(s.rho),
                num(s.lambda),
                s.outer_iterations.to_string(),
                num(s.u_exponent),
                num(s.u_expected),
                num(s.grad_exponent),
                num(s.density_exponent),
                String::new(),
            ]),
            Err(e) => {
                let mut row = vec![axis_name.to_string(), num(p.value), "failed".into()];
                row.extend(std::iter::repeat(String::new()).take(7));
                row.push(csv_text(e));
                t.push(row);
            }
        }
    }
    dir.table("sweep.csv", &t)?;

    let ok: Vec<(f64, &PointSummary)> = points.iter().filter_map(|p| p.outcome.as_ref().ok().map(|s| (p.value, s))).collect();
    let mut summary = Table::new(
        "quantity: summary statistic of the sweep; value: its value",
        vec!["quantity", "value"],
    );
    let mut results = vec![("command", Value::String("sweep".into()))];
    if sweep.axis == SweepAxis::NNodes && ok.len() >= 3 {
        let ns: Vec<f64> = ok.iter().map(|p| p.0).collect();
        let rhos: Vec<f64> = ok.iter().map(|p| p.1.rho).collect();
        let orders = richardson_orders(&ns, &rhos);
        for (k, o) in orders.iter().enumerate() {
            summary.push(vec![format!("rho_order_{}_{}_{}", ns[k], ns[k + 1], ns[k + 2]), num(*o)]);
        }
        results.push(("rho_orders", Value::Array(orders.iter().map(|&o| f(o)).collect())));
    }
    for (v, s) in &ok {
        summary.push(vec![format!("u_exponent_gap_at_{v}"), num((s.u_exponent - s.u_expected).abs())]);
    }
    dir.table("sweep_summary.csv", &summary)?;

    let failures = points.len() - ok.len();
    results.push(("points", int(points.len())));
    results.push(("failures", int(failures)));
    dir.manifest(cfg, table(results))?;
    if failures > 0 {
        return Err(CliError::Solver(format!("{failures} of {} sweep points failed", points.len())));
    }
    Ok(out)
}
