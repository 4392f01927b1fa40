//! Stationary Fokker–Planck equation `sigma m'' + (m b)' = 0` in one dimension.
//!
//! The zero-flux relation `sigma m' + m b = 0` is integrated in closed form
//! after removing the `gamma/d` singularity of the drift at both ends:
//!
//! ```text
//! ln m = (gamma_l/sigma) ln(x - a) + (gamma_r/sigma) ln(b - x) - (1/sigma) int (b - b_lead)
//! ```
//!
//! A Scharfetter–Gummel discretization of the same operator, solved as a
//! null-vector problem, serves as an independent cross-check.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::domain::{derivative, derivative_high_order, GridDomain, ScalarField};
use crate::measure::{DensityMeasure, JointMeasure, MeasureError};
use crate::model::HamiltonianModel;

#[derive(Debug, Error, Clone)]
pub enum FpError {
    #[error("invariance conditions fail: {0}")]
    ConditionsFailed(String),
    #[error("normalization failed: {0}")]
    Normalization(#[from] MeasureError),
    #[error("drift and grid sizes differ")]
    GridMismatch,
    #[error("non-finite drift at node {0}")]
    NonFinite(usize),
    #[error("singular null-vector system")]
    Singular,
}

/// Nodal drift of the density equation.
#[derive(Debug, Clone)]
pub struct DriftField {
    grid: Arc<GridDomain>,
    b: Vec<f64>,
    gamma_left: f64,
    gamma_right: f64,
}

impl DriftField {
    pub fn new(grid: Arc<GridDomain>, b: Vec<f64>) -> Result<Self, FpError> {
        if b.len() != grid.len() || b.len() < 5 {
            return Err(FpError::GridMismatch);
        }
        if let Some(i) = b.iter().position(|v| !v.is_finite()) {
            return Err(FpError::NonFinite(i));
        }
        let x = grid.nodes();
        let n = x.len();
        // b ~ (gamma/d) n at the ends: n = -1 on the left, +1 on the right
        let gamma_left = -b[1] * (x[1] - grid.a());
        let gamma_right = b[n - 2] * (grid.b() - x[n - 2]);
        Ok(Self { grid, b, gamma_left, gamma_right })
    }

    pub fn from_fn(grid: Arc<GridDomain>, f: impl Fn(f64) -> f64) -> Result<Self, FpError> {
        let b = grid.nodes().iter().map(|&x| f(x)).collect();
        Self::new(grid, b)
    }

    pub fn grid(&self) -> &Arc<GridDomain> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.b
    }

    pub fn gamma_left(&self) -> f64 {
        self.gamma_left
    }

    pub fn gamma_right(&self) -> f64 {
        self.gamma_right
    }

    /// Mean of the two fitted boundary coefficients.
    pub fn asymptotic_gamma(&self) -> f64 {
        0.5 * (self.gamma_left + self.gamma_right)
    }
}

/// `b = D_pH(u', mu)` at interior nodes and `sigma q'/d n` at the two ends.
pub fn drift_from_gradient(model: &HamiltonianModel, mu: &JointMeasure, grad_u: &ScalarField) -> Result<DriftField, FpError> {
    let fr = model.freeze(mu);
    let grid = grad_u.grid().clone();
    let n = grid.len();
    let x = grid.nodes();
    let mut b: Vec<f64> = grad_u.values().iter().map(|&p| fr.dp_h(&[p])[0]).collect();
    let g = model.sigma() * model.q_conj();
    b[0] = -g / (x[0] - grid.a());
    b[n - 1] = g / (grid.b() - x[n - 1]);
    DriftField::new(grid, b)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionsReport {
    /// Width of the boundary strip where the conditions are tested.
    pub delta0: f64,
    /// Smallest `C` with `b . n / sigma >= 1/d - C d` on the strip.
    pub c_min: f64,
    /// Largest `C` accepted, `1/delta0^2`.
    pub c_threshold: f64,
    pub confinement_passed: bool,
    /// Largest sampled `gamma0` in `(0, 1]` with `b'/sigma >= -C d^(gamma0 - 2)` for some `C <= delta0^(-gamma0)`.
    pub gamma0: Option<f64>,
    pub jacobian_passed: bool,
    /// Node where the confinement bound is tightest.
    pub worst_x: f64,
}

impl ConditionsReport {
    pub fn passed(&self) -> bool {
        self.confinement_passed && self.jacobian_passed
    }
}

pub const STRIP_FRACTION: f64 = 0.1;

/// Evaluates the two boundary-strip conditions on the drift.
pub fn check_invariance_conditions(b: &DriftField, sigma: f64) -> ConditionsReport {
    let grid = &b.grid;
    let delta0 = STRIP_FRACTION * grid.length();
    let x = grid.nodes();
    let d = grid.distances();
    let nrm = grid.normals();
    let strip: Vec<usize> = (0..x.len()).filter(|&i| d[i] <= delta0).collect();
    let mut c_min = f64::NEG_INFINITY;
    let mut worst_x = x[0];
    for &i in &strip {
        let c = (1.0 / d[i] - b.b[i] * nrm[i] / sigma) / d[i];
        if c > c_min {
            c_min = c;
            worst_x = x[i];
        }
    }
    let c_min = c_min.max(0.0);
    let c_threshold = 1.0 / (delta0 * delta0);
    let db = derivative(x, &b.b);
    let mut gamma0 = None;
    for k in 1..=20 {
        let g0 = k as f64 * 0.05;
        let need = strip
            .iter()
            .map(|&i| (-db[i] / sigma).max(0.0) * d[i].powf(2.0 - g0))
            .fold(0.0, f64::max);
        if need <= delta0.powf(-g0) {
            gamma0 = Some(g0);
        }
    }
    ConditionsReport {
        delta0,
        c_min,
        c_threshold,
        confinement_passed: c_min <= c_threshold,
        gamma0,
        jacobian_passed: gamma0.is_some(),
        worst_x,
    }
}

/// Invariant density from the zero-flux relation; rejects drifts failing
/// [`check_invariance_conditions`].
pub fn solve_fp_1d(model: &HamiltonianModel, b: &DriftField) -> Result<DensityMeasure, FpError> {
    let report = check_invariance_conditions(b, model.sigma());
    if !report.passed() {
        return Err(FpError::ConditionsFailed(format!(
            "C_min = {:.3e} (limit {:.3e}), gamma0 = {:?}",
            report.c_min, report.c_threshold, report.gamma0
        )));
    }
    zero_flux_density(b, model.sigma())
}

/// Zero-flux quadrature without the condition check.
pub fn zero_flux_density(b: &DriftField, sigma: f64) -> Result<DensityMeasure, FpError> {
    let grid = &b.grid;
    let x = grid.nodes();
    let n = x.len();
    let (a, bb) = (grid.a(), grid.b());
    let (gl, gr) = (b.gamma_left.max(0.0), b.gamma_right.max(0.0));
    let rem: Vec<f64> = (0..n).map(|i| b.b[i] + gl / (x[i] - a) - gr / (bb - x[i])).collect();
    let mut cum = vec![0.0; n];
    for i in 1..n {
        cum[i] = cum[i - 1] + 0.5 * (x[i] - x[i - 1]) * (rem[i] + rem[i - 1]);
    }
    let logm: Vec<f64> = (0..n)
        .map(|i| (gl * (x[i] - a).ln() + gr * (bb - x[i]).ln() - cum[i]) / sigma)
        .collect();
    let top = logm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(FpError::Normalization(MeasureError::ZeroMass(top)));
    }
    let m: Vec<f64> = logm.iter().map(|v| (v - top).exp()).collect();
    let (kl, kr) = (gl / sigma, gr / sigma);
    let dl = x[0] - a;
    let dr = bb - x[n - 1];
    let excluded = m[0] * dl / (kl + 1.0) + m[n - 1] * dr / (kr + 1.0);
    Ok(DensityMeasure::new(grid.clone(), m, excluded)?)
}

fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

/// Density from the Scharfetter–Gummel discretization, solved as the null
/// vector of the discrete operator with one row replaced by `m(x0) = 1`.
pub fn null_vector_density(b: &DriftField, sigma: f64) -> Result<DensityMeasure, FpError> {
    let grid = &b.grid;
    let x = grid.nodes();
    let n = x.len();
    // edge fluxes J = (sigma/h)(B(-P) m_{i+1} - B(P) m_i), P = b h / sigma
    let mut lo = vec![0.0; n - 1];
    let mut hi = vec![0.0; n - 1];
    for i in 0..n - 1 {
        let h = x[i + 1] - x[i];
        let p = 0.5 * (b.b[i] + b.b[i + 1]) * h / sigma;
        lo[i] = -sigma / h * bernoulli(p);
        hi[i] = sigma / h * bernoulli(-p);
    }
    // row i: J_{i+1/2} - J_{i-1/2} = 0, with zero flux through the ends
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        if i + 1 < n {
            diag[i] += lo[i];
            sup[i] += hi[i];
        }
        if i > 0 {
            sub[i] -= lo[i - 1];
            diag[i] -= hi[i - 1];
        }
    }
    let k = grid.midpoint_index();
    sub[k] = 0.0;
    sup[k] = 0.0;
    diag[k] = 1.0;
    rhs[k] = 1.0;
    let m = tridiagonal(&sub, &diag, &sup, &rhs).ok_or(FpError::Singular)?;
    let m: Vec<f64> = m.into_iter().map(|v| v.max(0.0)).collect();
    let (kl, kr) = (b.gamma_left.max(0.0) / sigma, b.gamma_right.max(0.0) / sigma);
    let excluded = m[0] * (x[0] - grid.a()) / (kl + 1.0) + m[n - 1] * (grid.b() - x[n - 1]) / (kr + 1.0);
    Ok(DensityMeasure::new(grid.clone(), m, excluded)?)
}

fn tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 {
        return None;
    }
    c[0] = sup[0] / beta;
    d[0] = rhs[0] / beta;
    for i in 1..n {
        beta = diag[i] - sub[i] * c[i - 1];
        if beta == 0.0 || !beta.is_finite() {
            return None;
        }
        c[i] = sup[i] / beta;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Some(d)
}

/// `int |m1 - m2|` by trapezoid on a shared grid.
pub fn l1_difference(m1: &DensityMeasure, m2: &DensityMeasure) -> f64 {
    let diff: Vec<f64> = m1.density().iter().zip(m2.density()).map(|(a, b)| (a - b).abs()).collect();
    crate::domain::trapezoid(m1.grid().nodes(), &diff)
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityReport {
    pub exponent: f64,
    pub expected_exponent: f64,
    /// Mean of `m / d^q'` over the window.
    pub coefficient: f64,
    /// Envelope constants `min` and `max` of `m / d^q'` over the window.
    pub a1: f64,
    pub a2: f64,
    pub window: (f64, f64),
    pub passed: bool,
}

pub const DENSITY_EXPONENT_TOL: f64 = 0.05;

/// Log–log fit of `m` against `d` near the boundary.
pub fn verify_density_asymptotics(m: &DensityMeasure, model: &HamiltonianModel) -> DensityReport {
    let grid = m.grid();
    let qc = model.q_conj();
    let window = (5.0 * grid.h_min(), STRIP_FRACTION * grid.length());
    let d = grid.distances();
    let pts: Vec<(f64, f64)> = d
        .iter()
        .zip(m.density())
        .filter(|(d, v)| **d >= window.0 && **d <= window.1 && **v > 0.0)
        .map(|(d, v)| (*d, *v))
        .collect();
    let k = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (d, v)| (a + d.ln(), b + v.ln()));
    let (mx, my) = (sx / k, sy / k);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (d, v) in &pts {
        sxy += (d.ln() - mx) * (v.ln() - my);
        sxx += (d.ln() - mx).powi(2);
    }
    let exponent = if sxx > 0.0 { sxy / sxx } else { f64::NAN };
    let ratios: Vec<f64> = pts.iter().map(|(d, v)| v / d.powf(qc)).collect();
    let coefficient = ratios.iter().sum::<f64>() / k;
    let a1 = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let a2 = ratios.iter().cloned().fold(0.0, f64::max);
    DensityReport {
        exponent,
        expected_exponent: qc,
        coefficient,
        a1,
        a2,
        window,
        passed: (exponent - qc).abs() <= DENSITY_EXPONENT_TOL,
    }
}

/// Weak-form defect on the truncated interval `[x_lo, x_hi]` of nodes at
/// distance at least `exclude_below`:
///
/// ```text
/// max_phi | int (-sigma phi'' + b phi') m dx + sigma [phi' m](x_hi) - sigma [phi' m](x_lo) |
/// ```
///
/// The boundary term is what integration by parts leaves on a truncated
/// interval when the flux `sigma m' + b m` vanishes.
pub fn weak_solution_residual(
    m: &DensityMeasure,
    b: &DriftField,
    sigma: f64,
    test_functions: &[ScalarField],
    exclude_below: f64,
) -> f64 {
    let grid = m.grid();
    let x = grid.nodes();
    let d = grid.distances();
    let rho = m.density();
    let keep: Vec<usize> = (0..x.len()).filter(|&i| d[i] >= exclude_below).collect();
    let (lo, hi) = match (keep.first(), keep.last()) {
        (Some(&lo), Some(&hi)) if hi > lo => (lo, hi),
        _ => return 0.0,
    };
    test_functions
        .iter()
        .map(|phi| {
            let p1 = derivative_high_order(x, phi.values(), 1);
            let p2 = derivative_high_order(x, phi.values(), 2);
            let g: Vec<f64> = (lo..=hi).map(|i| rho[i] * (-sigma * p2[i] + b.b[i] * p1[i])).collect();
            let interior = crate::domain::trapezoid(&x[lo..=hi], &g);
            (interior + sigma * (p1[hi] * rho[hi] - p1[lo] * rho[lo])).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct FluxResidual {
    /// `sigma m' + m b` per node.
    pub nodal: Vec<f64>,
    pub max_abs: f64,
    /// `max m/d`.
    pub scale: f64,
    pub relative: f64,
}

/// Zero-flux defect with a fourth-order derivative of `m`.
pub fn flux_residual(m: &DensityMeasure, b: &DriftField, sigma: f64) -> FluxResidual {
    let grid = m.grid();
    let x = grid.nodes();
    let d = grid.distances();
    let dm = derivative_high_order(x, m.density(), 1);
    let nodal: Vec<f64> = (0..x.len()).map(|i| sigma * dm[i] + m.density()[i] * b.b[i]).collect();
    let max_abs = nodal.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let scale = m.density().iter().zip(&d).map(|(v, d)| v / d).fold(0.0, f64::max);
    FluxResidual { nodal, max_abs, scale, relative: max_abs / scale }
}
