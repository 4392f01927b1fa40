//! CSV tables, SVG figures and manifests for a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mfgc::fp::flux_residual;
use mfgc::hjb::{leading_coefficient, AsymptoticsReport, OmegaCase};
use mfgc::mfgc::EquilibriumState;
use mfgc::model::HamiltonianModel;

use crate::config::{Format, RunConfig};
use crate::svg::{Plot, Series};

/// A table with one comment line describing the columns.
#[derive(Debug, Clone)]
pub struct Table {
    pub comment: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(comment: impl Into<String>, header: Vec<&'static str>) -> Self {
        Self { comment: comment.into(), header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for line in self.comment.lines() {
            let _ = writeln!(s, "# {line}");
        }
        let _ = writeln!(s, "{}", self.header.join(","));
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Output directory for one run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    csv: bool,
    svg: bool,
}

impl RunDir {
    pub fn create(path: &Path, cfg: &RunConfig) -> std::io::Result<Self> {
        fs::create_dir_all(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            csv: cfg.outputs.formats.contains(&Format::Csv),
            svg: cfg.outputs.formats.contains(&Format::Svg),
        })
    }

    pub fn table(&self, name: &str, t: &Table) -> std::io::Result<()> {
        if self.csv {
            fs::write(self.path.join(name), t.render())?;
        }
        Ok(())
    }

    pub fn plot(&self, name: &str, p: &Plot) -> std::io::Result<()> {
        if self.svg {
            fs::write(self.path.join(name), p.render())?;
        }
        Ok(())
    }

    pub fn text(&self, name: &str, s: &str) -> std::io::Result<()> {
        fs::write(self.path.join(name), s)
    }

    /// Writes the configuration with a `results` table appended.
    pub fn manifest(&self, cfg: &RunConfig, results: toml::Table) -> std::io::Result<()> {
        let mut c = cfg.clone();
        c.results = Some(results);
        fs::write(self.path.join("manifest.toml"), c.to_toml())
    }
}

/// Writes the solution, density, measure, outer-iteration and homotopy tables and figures.
pub fn write_equilibrium(dir: &RunDir, model: &HamiltonianModel, eq: &EquilibriumState) -> std::io::Result<()> {
    let grid = eq.u.grid().clone();
    let x = grid.nodes();
    let d = grid.distances();

    let mut sol = Table::new(
        "x: node; d: distance to the boundary; u: value function with u(x0) = 0; grad_u: derivative of u",
        vec!["x", "d", "u", "grad_u"],
    );
    for i in 0..x.len() {
        sol.push(vec![num(x[i]), num(d[i]), num(eq.u.values()[i]), num(eq.grad_u.values()[i])]);
    }
    dir.table("solution.csv", &sol)?;

    let flux = flux_residual(&eq.m, &eq.drift, model.sigma());
    let mut den = Table::new(
        format!(
            "x: node; d: distance to the boundary; m: invariant density; flux_residual: sigma m' + b m (excluded boundary mass {})",
            num(eq.m.excluded_mass())
        ),
        vec!["x", "d", "m", "flux_residual"],
    );
    for i in 0..x.len() {
        den.push(vec![num(x[i]), num(d[i]), num(eq.m.density()[i]), num(flux.nodal[i])]);
    }
    dir.table("density.csv", &den)?;

    let mut mu = Table::new("x: atom position; alpha: control; w: weight of the joint state-control measure", vec!["x", "alpha", "w"]);
    for j in 0..eq.mu.len() {
        mu.push(vec![num(eq.mu.position(j)), num(eq.mu.control(j)[0]), num(eq.mu.weight(j))]);
    }
    dir.table("measure.csv", &mu)?;

    let mut outer = Table::new(
        "iteration: outer update; w1_gap: transport distance between successive measures; rho_gap: change of the ergodic constant; drift_gap: sup change of the drift; omega: damping; moment: Lambda^q' at the iterate; moment_bound: a priori bound",
        vec!["iteration", "w1_gap", "rho_gap", "drift_gap", "omega", "moment", "moment_bound"],
    );
    for (k, r) in eq.residual_history.iter().enumerate() {
        let (mv, mb) = eq.moment_checks.get(k).map(|c| (num(c.lambda_pow), num(c.bound))).unwrap_or_default();
        outer.push(vec![(k + 1).to_string(), num(r.w1_gap), num(r.rho_gap), num(r.drift_gap), num(r.omega), mv, mb]);
    }
    dir.table("outer.csv", &outer)?;

    let mut hom = Table::new(
        "lambda: discount; lambda_u_x0: lambda times the discounted value at the normalization node (tends to -rho)",
        vec!["lambda", "lambda_u_x0"],
    );
    for &(l, v) in &eq.homotopy_trace {
        hom.push(vec![num(l), num(v)]);
    }
    dir.table("homotopy.csv", &hom)?;

    let u_pts: Vec<(f64, f64)> = x.iter().copied().zip(eq.u.values().iter().copied()).collect();
    let mut u_plot = Plot::new("value function", "x", "u").with(Series::new("u", u_pts));
    for side in boundary_overlay(model, eq) {
        u_plot = u_plot.with(side);
    }
    dir.plot("u.svg", &u_plot)?;

    let m_pts: Vec<(f64, f64)> = x.iter().copied().zip(eq.m.density().iter().copied()).collect();
    dir.plot("m.svg", &Plot::new("invariant density", "x", "m").with(Series::new("m", m_pts)))?;

    if !eq.homotopy_trace.is_empty() {
        let trace: Vec<(f64, f64)> = eq.homotopy_trace.iter().map(|&(l, v)| (l, -v)).collect();
        let rho_line: Vec<(f64, f64)> = trace.iter().map(|&(l, _)| (l, eq.rho)).collect();
        let mut p = Plot::new("ergodic constant along the discount homotopy", "lambda", "-lambda u_lambda(x0)")
            .with(Series::new("-lambda u(x0)", trace))
            .with(Series::new("rho", rho_line).dashed());
        p.log_x = true;
        dir.plot("homotopy.svg", &p)?;
    }
    Ok(())
}

/// Leading boundary profile matched to `u` at a quarter of the interval from each end.
fn boundary_overlay(model: &HamiltonianModel, eq: &EquilibriumState) -> Vec<Series> {
    let grid = eq.u.grid();
    let x = grid.nodes();
    let u = eq.u.values();
    let q = model.q();
    let c = leading_coefficient(q, eq.hjb.f1 / model.sigma());
    let profile = |d: f64| if q >= 2.0 { -c * d.ln() } else { c * d.powf(2.0 - model.q_conj()) };
    let reach = 0.25 * grid.length();
    let left: Vec<usize> = (0..x.len()).filter(|&i| x[i] - grid.a() <= reach).collect();
    let right: Vec<usize> = (0..x.len()).filter(|&i| grid.b() - x[i] <= reach).collect();
    let mut out = Vec::new();
    for (idx, anchor, name) in [(&left, left.last(), "boundary profile (left)"), (&right, right.first(), "boundary profile (right)")] {
        let Some(&k) = anchor else { continue };
        let dk = grid.distance_unchecked(x[k]);
        let pts = idx.iter().map(|&i| (x[i], u[k] + profile(grid.distance_unchecked(x[i])) - profile(dk))).collect();
        out.push(Series::new(name, pts).dashed());
    }
    out
}

pub fn omega_description(q: f64) -> String {
    let case = match OmegaCase::for_q(q) {
        OmegaCase::Linear => "linear: omega(d) = d",
        OmegaCase::LinearLog => "linear-log: omega(d) = d |ln d|",
        OmegaCase::Power => "power: omega(d) = d^(q'-2)",
    };
    format!(
        "correction rate for q = {q}: {case} (cases: 1<q<3/2 -> d; q=3/2 -> d|ln d|; 3/2<q<2 -> d^(q'-2); q=2 -> d)"
    )
}

pub fn write_asymptotics(dir: &RunDir, rep: &AsymptoticsReport) -> std::io::Result<()> {
    let mut t = Table::new(
        format!(
            "d: distance to the boundary; u: value relative to the window; predicted_leading: leading boundary profile; ratio: u / predicted_leading\n{}",
            omega_description(rep.q)
        ),
        vec!["d", "u", "predicted_leading", "ratio"],
    );
    for r in &rep.rows {
        t.push(vec![num(r.d), num(r.u), num(r.predicted_leading), num(r.ratio)]);
    }
    dir.table("asymptotics.csv", &t)?;
    let pts: Vec<(f64, f64)> = rep.rows.iter().map(|r| (r.d, r.u.abs())).collect();
    let pred: Vec<(f64, f64)> = rep.rows.iter().map(|r| (r.d, r.predicted_leading.abs())).collect();
    let p = Plot::new("boundary rate fit", "d", "|u|")
        .log_log()
        .with(Series::new("|u|", pts))
        .with(Series::new("leading profile", pred).dashed());
    dir.plot("asymptotics.svg", &p)
}
