//! Outer equilibrium iteration: HJB solve, drift, invariant density and
//! control fixed point, with damping, a priori projection and diagnostics.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GridDomain, ScalarField, VectorField};
use crate::fp::{self, DriftField, FpError};
use crate::hjb::{self, BoundaryData, DiscountSchedule, HJBSolution, HjbError, HjbOptions, WarmStart};
use crate::measure::{
    lambda_moment_bound, pushforward, solve_mu_fixed_point, transport_distance_1d, DensityMeasure, FixedPointOptions,
    JointMeasure, MeasureError,
};
use crate::model::HamiltonianModel;

#[derive(Debug, Error)]
pub enum EquilibriumError {
    #[error("HJB solve failed at outer iteration {iteration}: {source}")]
    Hjb { iteration: usize, source: HjbError },
    #[error("density solve failed at outer iteration {iteration}: {source}")]
    Fp { iteration: usize, source: FpError },
    #[error("control fixed point failed at outer iteration {iteration}: {source}")]
    Measure { iteration: usize, source: MeasureError },
    #[error("outer iteration did not converge in {iterations} steps")]
    OuterNonConvergence { iterations: usize, history: Vec<OuterResidual> },
    #[error("reference problem failed: {0}")]
    Reference(String),
    #[error("invalid input: {0}")]
    BadInput(String),
}

/// Source term `F(mu, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FRule {
    Constant { value: f64 },
    /// `offset + strength * int exp(-(x - y)^2 / (2 width^2)) dm(y)`; monotone for `strength >= 0`.
    GaussianConvolution { strength: f64, width: f64, offset: f64 },
}

impl Default for FRule {
    fn default() -> Self {
        Self::Constant { value: 0.0 }
    }
}

impl FRule {
    pub fn eval(&self, mu: &JointMeasure, grid: &Arc<GridDomain>) -> ScalarField {
        match self {
            Self::Constant { value } => ScalarField::constant(grid.clone(), *value),
            Self::GaussianConvolution { strength, width, offset } => {
                let s2 = 2.0 * width * width;
                ScalarField::from_fn(grid.clone(), |x| {
                    let conv: f64 = mu
                        .positions()
                        .iter()
                        .zip(mu.weights())
                        .map(|(y, w)| w * (-(x - y) * (x - y) / s2).exp())
                        .sum();
                    offset + strength * conv
                })
            }
        }
    }

    pub fn depends_on_measure(&self) -> bool {
        matches!(self, Self::GaussianConvolution { strength, .. } if *strength != 0.0)
    }

    /// Upper bound for `sup_mu ||F(mu, .)||_{W^{1,inf}}`.
    pub fn w1_inf_bound(&self) -> f64 {
        match self {
            Self::Constant { value } => value.abs(),
            Self::GaussianConvolution { strength, width, offset } => {
                offset.abs() + strength.abs() + strength.abs() / (width * std::f64::consts::E.sqrt())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceControlProblem {
    pub v: ScalarField,
    pub rho_tilde: f64,
    /// `b0 = -q |v'|^(q-2) v'`.
    pub b0: ScalarField,
    /// Invariant density of the reference feedback.
    pub m0: DensityMeasure,
    pub newton_residual: f64,
}

/// Uncoupled problem `-sigma v'' + |v'|^q + rho~ = 0`, its feedback and invariant density.
pub fn solve_reference_problem(q: f64, sigma: f64, grid: &Arc<GridDomain>) -> Result<ReferenceControlProblem, EquilibriumError> {
    let model = HamiltonianModel::pure_power(q, sigma).map_err(|e| EquilibriumError::Reference(e.to_string()))?;
    let mu = JointMeasure::dirac(0.5 * (grid.a() + grid.b()), vec![0.0]);
    let f = ScalarField::constant(grid.clone(), 0.0);
    let sol = hjb::solve_ergodic(&model, &mu, &f, &BoundaryData::default(), &DiscountSchedule::Direct, &HjbOptions::default(), None)
        .map_err(|e| EquilibriumError::Reference(e.to_string()))?;
    let b0 = sol.grad_u.map(|p| -q * p.abs().powf(q - 2.0) * p);
    let drift = fp::drift_from_gradient(&model, &mu, &sol.grad_u).map_err(|e| EquilibriumError::Reference(e.to_string()))?;
    let m0 = fp::solve_fp_1d(&model, &drift).map_err(|e| EquilibriumError::Reference(e.to_string()))?;
    Ok(ReferenceControlProblem { v: sol.u, rho_tilde: sol.rho, b0, m0, newton_residual: sol.newton_residual })
}

/// `(4 C0^2 + 3 C0^2 int |b0|^q' dm0)^(1/q')`.
pub fn apriori_lambda_ceiling(reference: &ReferenceControlProblem, model: &HamiltonianModel, c0: f64) -> f64 {
    let qc = model.q_conj();
    let avg = reference.m0.expectation(&reference.b0.values().iter().map(|b| b.abs().powf(qc)).collect::<Vec<_>>());
    (4.0 * c0 * c0 + 3.0 * c0 * c0 * avg).powf(1.0 / qc)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquilibriumOptions {
    pub tol_outer: f64,
    pub max_outer: usize,
    pub omega: f64,
    pub omega_floor: f64,
    pub boundary: BoundaryData,
    /// Use the discount homotopy for the first HJB solve (later solves are
    /// direct, warm-started).
    pub homotopy_first: bool,
    pub hjb: HjbOptions,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iter: usize,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self {
            tol_outer: 1e-6,
            max_outer: 100,
            omega: 0.5,
            omega_floor: 1.0 / 64.0,
            boundary: BoundaryData::default(),
            homotopy_first: true,
            hjb: HjbOptions::default(),
            fixed_point_tol: 1e-12,
            fixed_point_max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OuterResidual {
    /// `W1(mu~_k, mu_k)`.
    pub w1_gap: f64,
    /// `|rho_k - rho_{k-1}|`.
    pub rho_gap: f64,
    /// `sup |b_k - b_{k-1}|` over interior nodes.
    pub drift_gap: f64,
    pub omega: f64,
}

/// Moment inequality evaluated at an accepted iterate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MomentCheck {
    pub lambda_pow: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResidualBundle {
    pub hjb: f64,
    pub flux: f64,
    pub pushforward: f64,
}

#[derive(Debug, Clone)]
pub struct EquilibriumState {
    pub u: ScalarField,
    pub rho: f64,
    pub grad_u: ScalarField,
    pub m: DensityMeasure,
    pub mu: JointMeasure,
    pub f: ScalarField,
    pub drift: DriftField,
    pub outer_iterations: usize,
    pub residual_history: Vec<OuterResidual>,
    pub apriori_bound: f64,
    pub c0_effective: f64,
    pub projection_triggers: usize,
    pub moment_checks: Vec<MomentCheck>,
    /// `int (F(mu_k) - F(mu_{k-1})) d(m_k - m_{k-1})` for consecutive outputs of the control fixed point.
    pub monotonicity_probes: Vec<f64>,
    pub residuals: ResidualBundle,
    pub hjb: HJBSolution,
    /// Discount homotopy of the first HJB solve, as `(lambda, lambda u_lambda(x0))`.
    pub homotopy_trace: Vec<(f64, f64)>,
    /// Relative gap between homotopy and direct ergodic constants on the first solve.
    pub homotopy_gap: Option<f64>,
}

impl EquilibriumState {
    pub fn lambda(&self, model: &HamiltonianModel) -> f64 {
        self.mu.lambda_r(model.q_conj())
    }
}

fn interior_sup_gap(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    (1..n - 1).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

/// Damped fixed-point iteration for the full system.
pub fn solve_equilibrium(
    model: &HamiltonianModel,
    f_rule: &FRule,
    grid: &Arc<GridDomain>,
    opts: &EquilibriumOptions,
    seed: Option<&JointMeasure>,
) -> Result<EquilibriumState, EquilibriumError> {
    if !(opts.tol_outer > 0.0) || !(opts.omega > 0.0 && opts.omega <= 1.0) {
        return Err(EquilibriumError::BadInput("tolerance and damping must be positive".into()));
    }
    let reference = solve_reference_problem(model.q(), model.sigma(), grid)?;
    let c0_effective = model.c0().max(f_rule.w1_inf_bound());
    let ceiling = apriori_lambda_ceiling(&reference, model, c0_effective);
    let qc = model.q_conj();
    let fp_opts = FixedPointOptions { tol: opts.fixed_point_tol, max_iter: opts.fixed_point_max_iter, ..Default::default() };

    let mut mu_t = match seed {
        Some(s) => s.clone(),
        None => pushforward(&DensityMeasure::uniform(grid.clone()), &VectorField::constant(grid.clone(), &[0.0]))
            .map_err(|source| EquilibriumError::Measure { iteration: 0, source })?,
    };
    let mut warm: Option<WarmStart> = None;
    let mut prev: Option<(f64, Vec<f64>, DensityMeasure, ScalarField)> = None;
    let mut history = Vec::new();
    let mut moment_checks = Vec::new();
    let mut probes = Vec::new();
    let mut omega = opts.omega;
    let mut triggers = 0;
    let mut updates = 0;
    let mut homotopy_trace = Vec::new();
    let mut homotopy_gap = None;

    for k in 0..=opts.max_outer {
        let f = f_rule.eval(&mu_t, grid);
        let schedule = if k == 0 && opts.homotopy_first { DiscountSchedule::default_homotopy() } else { DiscountSchedule::Direct };
        let sol = hjb::solve_ergodic(model, &mu_t, &f, &opts.boundary, &schedule, &opts.hjb, warm.as_ref())
            .map_err(|source| EquilibriumError::Hjb { iteration: k, source })?;
        if k == 0 {
            homotopy_trace = sol.lambda_history.clone();
            homotopy_gap = sol.mode_gap;
        }
        let drift = fp::drift_from_gradient(model, &mu_t, &sol.grad_u).map_err(|source| EquilibriumError::Fp { iteration: k, source })?;
        let m = fp::solve_fp_1d(model, &drift).map_err(|source| EquilibriumError::Fp { iteration: k, source })?;
        let grad = VectorField::from_scalar(&sol.grad_u);
        let fixed = solve_mu_fixed_point(model, &grad, &m, &fp_opts, Some(&mu_t))
            .map_err(|source| EquilibriumError::Measure { iteration: k, source })?;
        let mu_k = fixed.mu;

        let lambda_pow = mu_k.lambda_r(qc).powf(qc);
        let bound = lambda_moment_bound(model, model.c0(), &grad, &m);
        moment_checks.push(MomentCheck { lambda_pow, bound, holds: lambda_pow <= bound * (1.0 + 1e-12) });

        let w1 = transport_distance_1d(&mu_t, &mu_k);
        let f_out = f_rule.eval(&mu_k, grid);
        let (rho_gap, drift_gap) = match &prev {
            Some((rho, b, m_prev, f_prev)) => {
                if f_rule.depends_on_measure() {
                    let df: Vec<f64> = f_out.values().iter().zip(f_prev.values()).map(|(a, b)| a - b).collect();
                    let wa = m.node_masses();
                    let wb = m_prev.node_masses();
                    probes.push(df.iter().enumerate().map(|(i, d)| d * (wa[i] - wb[i])).sum());
                }
                ((sol.rho - rho).abs(), interior_sup_gap(drift.values(), b))
            }
            None => (f64::INFINITY, f64::INFINITY),
        };
        let last_w1 = history.last().map(|h: &OuterResidual| h.w1_gap);
        history.push(OuterResidual { w1_gap: w1, rho_gap, drift_gap, omega });

        if w1 <= opts.tol_outer && rho_gap <= opts.tol_outer * (1.0 + sol.rho.abs()) {
            let pushforward_residual = fixed.residual_history.last().copied().unwrap_or(0.0);
            let flux = fp::flux_residual(&m, &drift, model.sigma()).relative;
            return Ok(EquilibriumState {
                u: sol.u.clone(),
                rho: sol.rho,
                grad_u: sol.grad_u.clone(),
                m,
                mu: mu_k,
                f,
                drift,
                outer_iterations: updates,
                residual_history: history,
                apriori_bound: ceiling,
                c0_effective,
                projection_triggers: triggers,
                moment_checks,
                monotonicity_probes: probes,
                residuals: ResidualBundle { hjb: sol.newton_residual, flux, pushforward: pushforward_residual },
                hjb: sol,
                homotopy_trace,
                homotopy_gap,
            });
        }
        if k == opts.max_outer {
            break;
        }

        let next = if k == 0 {
            mu_k
        } else {
            if let Some(l) = last_w1 {
                if w1 > l {
                    omega = (omega * 0.5).max(opts.omega_floor);
                }
            }
            mu_t.blend(&mu_k, omega)
        };
        let lam = next.lambda_r(qc);
        mu_t = if lam > ceiling {
            triggers += 1;
            next.scaled_controls(ceiling / lam)
        } else {
            next
        };
        updates += 1;
        warm = Some(sol.warm_start());
        prev = Some((sol.rho, drift.values().to_vec(), m, f_out));
    }
    Err(EquilibriumError::OuterNonConvergence { iterations: updates, history })
}

/// `|rho - int (L(alpha, mu) + F(mu, x)) dmu|`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CostIdentity {
    pub rho: f64,
    pub average_cost: f64,
    /// Running cost of the truncated layers `d < delta`, where `L m` tends to a constant.
    pub boundary_layer: f64,
    pub gap: f64,
    pub passed: bool,
}

pub const COST_IDENTITY_TOL: f64 = 1e-3;

pub fn cost_identity(state: &EquilibriumState, model: &HamiltonianModel) -> CostIdentity {
    let fr = model.freeze(&state.mu);
    let mut avg = 0.0;
    for j in 0..state.mu.len() {
        let xj = state.mu.position(j);
        let fx = state.f.grid().interpolate(state.f.values(), xj);
        avg += state.mu.weight(j) * (fr.l(state.mu.control(j)) + fx);
    }
    let grid = state.m.grid();
    let n = grid.len();
    let mut layer = 0.0;
    if state.mu.len() == n && state.mu.positions() == grid.nodes() {
        let mass = state.m.total_mass() - state.m.excluded_mass();
        let rho_m = state.m.density();
        for i in [0, n - 1] {
            layer += grid.delta() * fr.l(state.mu.control(i)) * rho_m[i] / mass;
        }
    }
    let total = avg + layer;
    let gap = (state.rho - total).abs();
    CostIdentity {
        rho: state.rho,
        average_cost: total,
        boundary_layer: layer,
        gap,
        passed: gap <= COST_IDENTITY_TOL * (1.0 + state.rho.abs()),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairGap {
    pub a: usize,
    pub b: usize,
    pub w1: f64,
    pub rho: f64,
    pub m_l1: f64,
    pub u_sup: f64,
}

impl PairGap {
    pub fn max(&self) -> f64 {
        self.w1.max(self.rho).max(self.m_l1).max(self.u_sup)
    }
}

#[derive(Debug)]
pub struct ProbeReport {
    pub results: Vec<Result<EquilibriumState, EquilibriumError>>,
    pub gaps: Vec<PairGap>,
    pub threshold: f64,
    pub passed: bool,
}

/// Solves from every seed concurrently and compares all pairs.
pub fn uniqueness_probe(
    model: &HamiltonianModel,
    f_rule: &FRule,
    grid: &Arc<GridDomain>,
    opts: &EquilibriumOptions,
    seeds: &[JointMeasure],
) -> ProbeReport {
    let results: Vec<_> = seeds.par_iter().map(|s| solve_equilibrium(model, f_rule, grid, opts, Some(s))).collect();
    let threshold = 5.0 * opts.tol_outer;
    let mut gaps = Vec::new();
    let mut all_ok = seeds.len() >= 2;
    for a in 0..results.len() {
        for b in a + 1..results.len() {
            match (&results[a], &results[b]) {
                (Ok(sa), Ok(sb)) => {
                    let diff: Vec<f64> = sa.u.values().iter().zip(sb.u.values()).map(|(x, y)| x - y).collect();
                    let mean = diff.iter().sum::<f64>() / diff.len() as f64;
                    let gap = PairGap {
                        a,
                        b,
                        w1: transport_distance_1d(&sa.mu, &sb.mu),
                        rho: (sa.rho - sb.rho).abs(),
                        m_l1: fp::l1_difference(&sa.m, &sb.m),
                        u_sup: diff.iter().map(|d| (d - mean).abs()).fold(0.0, f64::max),
                    };
                    all_ok &= gap.max() <= threshold;
                    gaps.push(gap);
                }
                _ => all_ok = false,
            }
        }
    }
    ProbeReport { results, gaps, threshold, passed: all_ok }
}
