//! Densities on the grid, joint state-control measures, and the control
//! fixed point `mu = (I, -D_pH(p, mu)) # m`.

use std::sync::Arc;

use thiserror::Error;

use crate::domain::{trapezoid, GridDomain, VectorField};
use crate::model::HamiltonianModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("atom arrays disagree in length (positions {positions}, controls {controls}, weights {weights}, dim {dim})")]
    Shape { positions: usize, controls: usize, weights: usize, dim: usize },
    #[error("negative or non-finite weight {weight} at atom {index}")]
    BadWeight { index: usize, weight: f64 },
    #[error("weights sum to {0}, expected 1")]
    Mass(f64),
    #[error("non-finite atom data at index {0}")]
    NonFinite(usize),
    #[error("density is negative or non-finite at node {0}")]
    BadDensity(usize),
    #[error("density has zero or non-finite mass {0}")]
    ZeroMass(f64),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("control fixed point did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64, history: Vec<f64> },
    #[error("gradient violates the blow-up envelope: {0}")]
    HypothesisViolation(String),
}

/// Weighted atoms `(x_i, alpha_i, w_i)` with `alpha_i` in `R^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMeasure {
    dim: usize,
    x: Vec<f64>,
    alpha: Vec<f64>,
    w: Vec<f64>,
}

impl JointMeasure {
    pub fn new(dim: usize, x: Vec<f64>, alpha: Vec<f64>, w: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 || x.len() != w.len() || alpha.len() != x.len() * dim || x.is_empty() {
            return Err(MeasureError::Shape {
                positions: x.len(),
                controls: alpha.len(),
                weights: w.len(),
                dim,
            });
        }
        for (i, &wi) in w.iter().enumerate() {
            if !(wi >= 0.0 && wi.is_finite()) {
                return Err(MeasureError::BadWeight { index: i, weight: wi });
            }
        }
        for i in 0..x.len() {
            if !x[i].is_finite() || alpha[i * dim..(i + 1) * dim].iter().any(|a| !a.is_finite()) {
                return Err(MeasureError::NonFinite(i));
            }
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(MeasureError::Mass(total));
        }
        Ok(Self { dim, x, alpha, w })
    }

    /// Like [`Self::new`] but rescales the weights to unit mass.
    pub fn normalized(dim: usize, x: Vec<f64>, alpha: Vec<f64>, mut w: Vec<f64>) -> Result<Self, MeasureError> {
        let total: f64 = w.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(MeasureError::Mass(total));
        }
        w.iter_mut().for_each(|v| *v /= total);
        let total: f64 = w.iter().sum();
        // absorb the rounding error in the heaviest atom so no weight turns negative
        let heaviest = (0..w.len()).max_by(|&i, &j| w[i].total_cmp(&w[j])).unwrap_or(0);
        w[heaviest] += 1.0 - total;
        Self::new(dim, x, alpha, w)
    }

    pub fn dirac(x: f64, alpha: Vec<f64>) -> Self {
        let dim = alpha.len();
        Self { dim, x: vec![x], alpha, w: vec![1.0] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn position(&self, i: usize) -> f64 {
        self.x[i]
    }

    pub fn control(&self, i: usize) -> &[f64] {
        &self.alpha[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.w[i]
    }

    pub fn positions(&self) -> &[f64] {
        &self.x
    }

    pub fn controls(&self) -> &[f64] {
        &self.alpha
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn mean_control(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (k, a) in self.control(i).iter().enumerate() {
                m[k] += self.w[i] * a;
            }
        }
        m
    }

    /// `(int |alpha|^r dmu)^(1/r)`, or the essential sup for `r = inf`.
    pub fn lambda_r(&self, r: f64) -> f64 {
        let norms = (0..self.len()).map(|i| self.control(i).iter().map(|a| a * a).sum::<f64>().sqrt());
        if r.is_infinite() {
            return norms
                .zip(&self.w)
                .filter(|(_, &w)| w > 0.0)
                .map(|(n, _)| n)
                .fold(0.0, f64::max);
        }
        let s: f64 = norms.zip(&self.w).map(|(n, w)| w * n.powf(r)).sum();
        s.powf(1.0 / r)
    }

    /// Same atoms and weights with new controls.
    pub fn with_controls(&self, alpha: Vec<f64>) -> Self {
        assert_eq!(alpha.len(), self.alpha.len());
        Self { dim: self.dim, x: self.x.clone(), alpha, w: self.w.clone() }
    }

    pub fn scaled_controls(&self, factor: f64) -> Self {
        self.with_controls(self.alpha.iter().map(|a| a * factor).collect())
    }

    /// True when both measures have identical positions and weights.
    pub fn shares_support(&self, other: &Self) -> bool {
        self.dim == other.dim && self.x == other.x && self.w == other.w
    }

    /// Mixture `(1 - omega) self + omega other` on shared positions, merged
    /// to one atom per position with the mass-weighted mean control.
    pub fn blend(&self, other: &Self, omega: f64) -> Self {
        assert_eq!(self.x, other.x, "blend needs common atom positions");
        let n = self.len();
        let mut w = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(self.alpha.len());
        for i in 0..n {
            let wa = (1.0 - omega) * self.w[i];
            let wb = omega * other.w[i];
            let wt = wa + wb;
            w.push(wt);
            for k in 0..self.dim {
                let a = self.alpha[i * self.dim + k];
                let b = other.alpha[i * self.dim + k];
                alpha.push(if wt > 0.0 { (wa * a + wb * b) / wt } else { (1.0 - omega) * a + omega * b });
            }
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        Self { dim: self.dim, x: self.x.clone(), alpha, w }
    }
}

pub fn lambda_r(mu: &JointMeasure, r: f64) -> f64 {
    mu.lambda_r(r)
}

/// Nodal density on a truncated grid, with the mass estimated to lie in the
/// two excluded boundary strips.
#[derive(Debug, Clone)]
pub struct DensityMeasure {
    grid: Arc<GridDomain>,
    density: Vec<f64>,
    excluded_mass: f64,
}

impl DensityMeasure {
    /// Normalizes `density` so that its trapezoidal mass plus `excluded_mass`
    /// (given relative to the unnormalized density) equals one.
    pub fn new(grid: Arc<GridDomain>, density: Vec<f64>, excluded_mass: f64) -> Result<Self, MeasureError> {
        if density.len() != grid.len() {
            return Err(MeasureError::GridMismatch);
        }
        if let Some(i) = density.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(MeasureError::BadDensity(i));
        }
        let mass = trapezoid(grid.nodes(), &density) + excluded_mass.max(0.0);
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(MeasureError::ZeroMass(mass));
        }
        let density = density.into_iter().map(|v| v / mass).collect();
        Ok(Self { grid, density, excluded_mass: excluded_mass.max(0.0) / mass })
    }

    pub fn uniform(grid: Arc<GridDomain>) -> Self {
        let n = grid.len();
        Self::new(grid, vec![1.0; n], 0.0).expect("uniform density")
    }

    pub fn grid(&self) -> &Arc<GridDomain> {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn excluded_mass(&self) -> f64 {
        self.excluded_mass
    }

    /// Trapezoidal mass on the truncated interval plus the excluded strips.
    pub fn total_mass(&self) -> f64 {
        trapezoid(self.grid.nodes(), &self.density) + self.excluded_mass
    }

    /// Quadrature masses per node, renormalized to one.
    pub fn node_masses(&self) -> Vec<f64> {
        let w = self.grid.trapezoid_weights();
        let mut m: Vec<f64> = w.iter().zip(&self.density).map(|(a, b)| a * b).collect();
        let total: f64 = m.iter().sum();
        m.iter_mut().for_each(|v| *v /= total);
        m
    }

    /// `int f dm` with node masses.
    pub fn expectation(&self, f: &[f64]) -> f64 {
        self.node_masses().iter().zip(f).map(|(w, v)| w * v).sum()
    }
}

/// Atoms at the grid nodes carrying the nodal controls.
pub fn pushforward(m: &DensityMeasure, control_field: &VectorField) -> Result<JointMeasure, MeasureError> {
    if control_field.grid().nodes() != m.grid().nodes() {
        return Err(MeasureError::GridMismatch);
    }
    JointMeasure::normalized(
        control_field.dim(),
        m.grid().nodes().to_vec(),
        control_field.values().to_vec(),
        m.node_masses(),
    )
}

fn euclid(x1: f64, a1: &[f64], x2: f64, a2: &[f64]) -> f64 {
    let mut s = (x1 - x2) * (x1 - x2);
    for (a, b) in a1.iter().zip(a2) {
        s += (a - b) * (a - b);
    }
    s.sqrt()
}

/// Transport distance between joint measures over a one-dimensional state.
///
/// Measures on a common support are compared atomwise,
/// `sum_i w_i |alpha1_i - alpha2_i|`. Otherwise atoms are sorted
/// lexicographically by `(x, alpha)` and matched by the monotone
/// (north-west corner) coupling.
pub fn transport_distance_1d(mu1: &JointMeasure, mu2: &JointMeasure) -> f64 {
    if mu1.shares_support(mu2) {
        return (0..mu1.len())
            .map(|i| mu1.weight(i) * euclid(0.0, mu1.control(i), 0.0, mu2.control(i)))
            .sum();
    }
    let order = |mu: &JointMeasure| {
        let mut idx: Vec<usize> = (0..mu.len()).collect();
        idx.sort_by(|&i, &j| {
            mu.position(i)
                .total_cmp(&mu.position(j))
                .then_with(|| {
                    mu.control(i)
                        .iter()
                        .zip(mu.control(j))
                        .map(|(a, b)| a.total_cmp(b))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
        });
        idx
    };
    let o1 = order(mu1);
    let o2 = order(mu2);
    let (mut i, mut j) = (0, 0);
    let mut r1 = mu1.weight(o1[0]);
    let mut r2 = mu2.weight(o2[0]);
    let mut cost = 0.0;
    loop {
        let (a, b) = (o1[i], o2[j]);
        let t = r1.min(r2);
        cost += t * euclid(mu1.position(a), mu1.control(a), mu2.position(b), mu2.control(b));
        r1 -= t;
        r2 -= t;
        if r1 <= 1e-15 {
            i += 1;
            if i == o1.len() {
                break;
            }
            r1 = mu1.weight(o1[i]);
        }
        if r2 <= 1e-15 {
            j += 1;
            if j == o2.len() {
                break;
            }
            r2 = mu2.weight(o2[j]);
        }
    }
    cost
}

#[derive(Debug, Clone)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Upper limit for `max |p|^(q-1) d`.
    pub envelope_limit: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 200, envelope_limit: 1e8 }
    }
}

#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub mu: JointMeasure,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    /// Final damping factor (1 means undamped Picard).
    pub damping: f64,
}

/// The control map `mu -> (I, -D_pH(p, mu)) # m`.
pub fn control_map(model: &HamiltonianModel, grad_u: &VectorField, weights: &JointMeasure, mu: &JointMeasure) -> JointMeasure {
    let fr = model.freeze(mu);
    let dim = grad_u.dim();
    let mut alpha = Vec::with_capacity(grad_u.values().len());
    for i in 0..grad_u.grid().len() {
        for g in fr.dp_h(grad_u.at(i)) {
            alpha.push(-g);
        }
    }
    debug_assert_eq!(alpha.len(), weights.len() * dim);
    weights.with_controls(alpha)
}

/// Picard iteration with adaptive damping for the control fixed point.
pub fn solve_mu_fixed_point(
    model: &HamiltonianModel,
    grad_u: &VectorField,
    m: &DensityMeasure,
    opts: &FixedPointOptions,
    seed: Option<&JointMeasure>,
) -> Result<FixedPoint, MeasureError> {
    if grad_u.grid().nodes() != m.grid().nodes() {
        return Err(MeasureError::GridMismatch);
    }
    let grid = m.grid();
    let q = model.q();
    let qc = model.q_conj();
    let dist = grid.distances();
    let mut envelope: f64 = 0.0;
    for (i, d) in dist.iter().enumerate() {
        let p = grad_u.at(i).iter().map(|a| a * a).sum::<f64>().sqrt();
        envelope = envelope.max(p.powf(q - 1.0) * d);
    }
    if !(envelope <= opts.envelope_limit) {
        return Err(MeasureError::HypothesisViolation(format!(
            "max |p|^(q-1) d = {envelope:.3e} exceeds {:.3e}",
            opts.envelope_limit
        )));
    }
    let integrability = m.expectation(&dist.iter().map(|d| d.powf(-qc)).collect::<Vec<_>>());
    if !integrability.is_finite() {
        return Err(MeasureError::HypothesisViolation("int d^(-q') dm is not finite".into()));
    }

    let zero = pushforward(m, &VectorField::constant(grid.clone(), &vec![0.0; grad_u.dim()]))?;
    let mut mu = match seed {
        Some(s) if s.positions() == zero.positions() && s.dim() == zero.dim() => zero.with_controls(s.controls().to_vec()),
        _ => zero.clone(),
    };
    let mut history = Vec::new();
    let mut omega: f64 = 1.0;
    let mut iterations = 0;
    loop {
        let t = control_map(model, grad_u, &zero, &mu);
        let r = transport_distance_1d(&mu, &t);
        if let Some(&prev) = history.last() {
            if r > 0.9 * prev {
                omega = (omega * 0.5).max(1.0 / 1024.0);
            }
        }
        history.push(r);
        if r <= opts.tol {
            return Ok(FixedPoint { mu, iterations, residual_history: history, damping: omega });
        }
        if iterations >= opts.max_iter || !r.is_finite() {
            return Err(MeasureError::NonConvergence { iterations, residual: r, history });
        }
        mu = if omega == 1.0 { t } else { mu.blend(&t, omega) };
        iterations += 1;
    }
}

/// Right-hand side of the moment bound
/// `Lambda_q'(mu)^q' <= 4 C0^2 + (q'^(q-1) (2 C0)^q / q) ||p||^q_{L^q(m)}`.
pub fn lambda_moment_bound(model: &HamiltonianModel, c0: f64, grad_u: &VectorField, m: &DensityMeasure) -> f64 {
    let q = model.q();
    let qc = model.q_conj();
    let pq: Vec<f64> = (0..grad_u.grid().len())
        .map(|i| grad_u.at(i).iter().map(|a| a * a).sum::<f64>().sqrt().powf(q))
        .collect();
    4.0 * c0 * c0 + qc.powf(q - 1.0) * (2.0 * c0).powf(q) / q * m.expectation(&pq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Delta, Stretching};
    use std::f64::consts::PI;

    #[test]
    fn lambda_examples() {
        let d = JointMeasure::new(2, vec![0.1], vec![3.0, 4.0], vec![1.0]).unwrap();
        assert!((d.lambda_r(2.0) - 5.0).abs() < 1e-14);
        let two = JointMeasure::new(1, vec![0.1, 0.2], vec![0.0, 2.0], vec![0.5, 0.5]).unwrap();
        assert!((two.lambda_r(2.0) - 2f64.sqrt()).abs() < 1e-14);
        assert_eq!(two.lambda_r(f64::INFINITY), 2.0);
    }

    #[test]
    fn normalized_keeps_tiny_weights_nonnegative() {
        let mut w = vec![1e-17; 5];
        w.insert(2, 3.0);
        w.push(1e-300);
        let n = w.len();
        let x = (0..n).map(|i| i as f64).collect();
        let mu = JointMeasure::normalized(1, x, vec![0.0; n], w).unwrap();
        assert!(mu.weights().iter().all(|v| *v >= 0.0));
        assert!((mu.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn transport_examples() {
        let a = JointMeasure::dirac(0.3, vec![0.0]);
        let b = JointMeasure::dirac(0.3, vec![3.0]);
        assert_eq!(transport_distance_1d(&a, &a), 0.0);
        assert_eq!(transport_distance_1d(&a, &b), 3.0);
        let m1 = JointMeasure::new(1, vec![0.1, 0.5, 0.9], vec![1.0, -2.0, 0.5], vec![0.2, 0.5, 0.3]).unwrap();
        let m2 = m1.with_controls(vec![1.7, -1.3, 1.2]);
        assert!((transport_distance_1d(&m1, &m2) - 0.7).abs() < 1e-14);
        // disjoint supports use the sorted coupling
        let c = JointMeasure::new(1, vec![0.0, 1.0], vec![0.0, 0.0], vec![0.5, 0.5]).unwrap();
        let d = JointMeasure::new(1, vec![0.5, 1.5], vec![0.0, 0.0], vec![0.5, 0.5]).unwrap();
        assert!((transport_distance_1d(&c, &d) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn pushforward_of_manufactured_fields() {
        let g = Arc::new(GridDomain::new(0.0, 1.0, 1024, Delta::Auto, Stretching::BoundaryClustered).unwrap());
        let dens: Vec<f64> = g.nodes().iter().map(|x| 2.0 * (PI * x).sin().powi(2)).collect();
        let m = DensityMeasure::new(g.clone(), dens, 0.0).unwrap();
        let ctrl: Vec<f64> = g.nodes().iter().map(|x| 2.0 * PI / (PI * x).tan()).collect();
        let mu = pushforward(&m, &VectorField::new(g.clone(), 1, ctrl).unwrap()).unwrap();
        assert!((mu.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((mu.lambda_r(2.0) - 2.0 * PI).abs() < 0.01);
        let zero = pushforward(&m, &VectorField::constant(g.clone(), &[0.0])).unwrap();
        assert_eq!(zero.lambda_r(2.0), 0.0);
        let c = pushforward(&m, &VectorField::constant(g, &[-1.5])).unwrap();
        for r in [1.0, 2.0, 5.0, f64::INFINITY] {
            assert!((c.lambda_r(r) - 1.5).abs() < 1e-12);
        }
    }

    fn small_grid() -> Arc<GridDomain> {
        Arc::new(GridDomain::uniform(0.0, 1.0, 64, 0.01).unwrap())
    }

    #[test]
    fn decoupled_fixed_point_is_one_step() {
        let g = small_grid();
        let model = HamiltonianModel::pure_power(2.0, 1.0).unwrap();
        let grad = VectorField::new(g.clone(), 1, g.nodes().iter().map(|x| x - 0.5).collect()).unwrap();
        let m = DensityMeasure::uniform(g);
        let fp = solve_mu_fixed_point(&model, &grad, &m, &FixedPointOptions::default(), None).unwrap();
        assert_eq!(fp.iterations, 1);
    }

    #[test]
    fn linear_coupling_fixed_point() {
        let g = small_grid();
        let model = HamiltonianModel::shifted(2.0, 1.0, 0.5, 0.0).unwrap();
        let grad = VectorField::constant(g.clone(), &[1.0]);
        let dens: Vec<f64> = g.nodes().iter().map(|x| 1.0 + x).collect();
        let m = DensityMeasure::new(g, dens, 0.0).unwrap();
        let fp = solve_mu_fixed_point(&model, &grad, &m, &FixedPointOptions::default(), None).unwrap();
        assert!((fp.mu.mean_control()[0] + 1.0).abs() < 1e-10);
        assert!(fp.mu.controls().iter().all(|a| (a + 1.0).abs() < 1e-10));
        let bound = lambda_moment_bound(&model, model.c0(), &grad, &m);
        assert!(fp.mu.lambda_r(2.0).powi(2) <= bound);
    }

    #[test]
    fn envelope_violation_detected() {
        let g = small_grid();
        let model = HamiltonianModel::pure_power(2.0, 1.0).unwrap();
        let grad = VectorField::constant(g.clone(), &[1e12]);
        let m = DensityMeasure::uniform(g);
        let err = solve_mu_fixed_point(&model, &grad, &m, &FixedPointOptions::default(), None).unwrap_err();
        assert!(matches!(err, MeasureError::HypothesisViolation(_)));
    }
}
