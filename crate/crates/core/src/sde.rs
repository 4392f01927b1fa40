//! Monte Carlo check of the controlled diffusion `dX = a(X) dt + sqrt(2 sigma) dB`
//! under the equilibrium feedback `a = -D_pH(u', mu)`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::GridDomain;
use crate::measure::DensityMeasure;
use crate::mfgc::EquilibriumState;
use crate::model::{FrozenHamiltonian, HamiltonianModel};

#[derive(Debug, Error, Clone)]
pub enum SdeError {
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
    #[error("feedback and grid sizes differ")]
    GridMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub horizon: f64,
    pub base_dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// `dt = min(base_dt, kappa d^2)`.
    pub kappa: f64,
    /// Fraction of the horizon discarded before averaging.
    pub burn_in: f64,
    pub n_bins: usize,
    /// Retried steps below this size count as a collapse at the boundary.
    pub dt_floor: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { horizon: 200.0, base_dt: 1e-3, n_paths: 64, seed: 7, kappa: 0.01, burn_in: 0.25, n_bins: 50, dt_floor: 1e-12 }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SdeError> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SdeError::BadConfig(format!("horizon {}", self.horizon)));
        }
        if !(self.base_dt > 0.0) || !(self.kappa > 0.0) || !(self.dt_floor > 0.0) {
            return Err(SdeError::BadConfig("step parameters must be positive".into()));
        }
        if self.n_paths == 0 || self.n_bins == 0 {
            return Err(SdeError::BadConfig("need at least one path and one bin".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(SdeError::BadConfig(format!("burn_in {}", self.burn_in)));
        }
        Ok(())
    }
}

/// Feedback and running cost on a grid, with `a ~ -gamma n / d` beyond the
/// truncated ends.
#[derive(Debug, Clone)]
pub struct Feedback {
    grid: Arc<GridDomain>,
    /// `a(x_i) d(x_i)`, interpolated linearly.
    scaled: Vec<f64>,
    f: Vec<f64>,
    gamma: f64,
    sigma: f64,
    hamiltonian: FrozenHamiltonian,
}

impl Feedback {
    pub fn new(
        grid: Arc<GridDomain>,
        a: &[f64],
        f: &[f64],
        gamma: f64,
        sigma: f64,
        hamiltonian: FrozenHamiltonian,
    ) -> Result<Self, SdeError> {
        if a.len() != grid.len() || f.len() != grid.len() {
            return Err(SdeError::GridMismatch);
        }
        let d = grid.distances();
        let scaled = a.iter().zip(&d).map(|(a, d)| a * d).collect();
        Ok(Self { grid, scaled, f: f.to_vec(), gamma, sigma, hamiltonian })
    }

    pub fn from_equilibrium(eq: &EquilibriumState, model: &HamiltonianModel) -> Self {
        let fr = model.freeze(&eq.mu);
        let a: Vec<f64> = eq.grad_u.values().iter().map(|&p| -fr.dp_h(&[p])[0]).collect();
        let gamma = model.sigma() * model.q_conj();
        Self::new(eq.u.grid().clone(), &a, eq.f.values(), gamma, model.sigma(), fr).expect("equilibrium fields share a grid")
    }

    /// Feedback identically zero (not admissible).
    pub fn zero(eq: &EquilibriumState, model: &HamiltonianModel) -> Self {
        let n = eq.u.grid().len();
        Self::new(eq.u.grid().clone(), &vec![0.0; n], eq.f.values(), 0.0, model.sigma(), model.freeze(&eq.mu))
            .expect("equilibrium fields share a grid")
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn control(&self, x: f64) -> f64 {
        let g = &self.grid;
        let d = g.distance_unchecked(x);
        let nodes = g.nodes();
        if x < nodes[0] || x > nodes[nodes.len() - 1] {
            -self.gamma * g.normal(x) / d
        } else {
            g.interpolate(&self.scaled, x) / d
        }
    }

    pub fn running_cost(&self, x: f64, a: f64) -> f64 {
        self.hamiltonian.l(&[a]) + self.grid.interpolate(&self.f, x)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PathRecord {
    pub exited: bool,
    /// Time and position of the exit or step collapse.
    pub exit_time: Option<f64>,
    pub exit_position: Option<f64>,
    /// Running cost averaged over the post-burn-in window.
    pub time_avg_cost: f64,
    pub steps: u64,
    pub min_distance: f64,
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub paths: Vec<PathRecord>,
    /// Post-burn-in occupation time per bin, summed over surviving paths.
    pub occupation: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub config: SimulationConfig,
}

impl PathEnsemble {
    pub fn exits(&self) -> usize {
        self.paths.iter().filter(|p| p.exited).count()
    }

    pub fn exit_fraction(&self) -> f64 {
        self.exits() as f64 / self.paths.len() as f64
    }
}

const EXIT_FRACTION_OF_LENGTH: f64 = 1e-10;
const MAX_RETRIES: usize = 20;

fn simulate_one(fb: &Feedback, cfg: &SimulationConfig, index: u64, edges: &[f64]) -> (PathRecord, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let g = &fb.grid;
    let (a, b) = (g.a(), g.b());
    let exit_d = EXIT_FRACTION_OF_LENGTH * g.length();
    let width = edges[1] - edges[0];
    let mut occ = vec![0.0; cfg.n_bins];
    let mut x = 0.5 * (a + b);
    let mut t = 0.0;
    let t0 = cfg.burn_in * cfg.horizon;
    let mut cost = 0.0;
    let mut steps = 0u64;
    let mut min_d = f64::INFINITY;
    let noise = (2.0 * fb.sigma).sqrt();
    let inside = |y: f64| y - a > exit_d && b - y > exit_d;
    let mut alpha = fb.control(x);
    let mut c_x = fb.running_cost(x, alpha);
    while t < cfg.horizon {
        let d = (x - a).min(b - x);
        min_d = min_d.min(d);
        let mut dt = cfg.base_dt.min(cfg.kappa * d * d).min(cfg.horizon - t);
        let mut next = None;
        for attempt in 0..=MAX_RETRIES {
            if attempt > 0 && dt < cfg.dt_floor {
                break;
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            let kick = noise * dt.sqrt() * z;
            let predictor = x + alpha * dt + kick;
            if inside(predictor) {
                let y = x + 0.5 * (alpha + fb.control(predictor)) * dt + kick;
                if inside(y) {
                    next = Some(y);
                    break;
                }
            }
            dt *= 0.25;
        }
        let Some(y) = next else {
            let rec = PathRecord {
                exited: true,
                exit_time: Some(t),
                exit_position: Some(x),
                time_avg_cost: f64::NAN,
                steps,
                min_distance: min_d,
            };
            return (rec, vec![0.0; cfg.n_bins]);
        };
        let alpha_y = fb.control(y);
        let c_y = fb.running_cost(y, alpha_y);
        let w = if t >= t0 { dt } else { (t + dt - t0).max(0.0) };
        if w > 0.0 {
            cost += 0.5 * (c_x + c_y) * w;
            let k = (((x - a) / width) as usize).min(cfg.n_bins - 1);
            occ[k] += w;
        }
        x = y;
        alpha = alpha_y;
        c_x = c_y;
        t += dt;
        steps += 1;
    }
    let rec = PathRecord {
        exited: false,
        exit_time: None,
        exit_position: None,
        time_avg_cost: cost / (cfg.horizon - t0),
        steps,
        min_distance: min_d,
    };
    (rec, occ)
}

/// Heun predictor-corrector paths started at the midpoint, one ChaCha stream per path.
pub fn simulate_feedback(fb: &Feedback, cfg: &SimulationConfig) -> Result<PathEnsemble, SdeError> {
    cfg.validate()?;
    let (a, b) = (fb.grid.a(), fb.grid.b());
    let edges: Vec<f64> = (0..=cfg.n_bins).map(|k| a + (b - a) * k as f64 / cfg.n_bins as f64).collect();
    let results: Vec<(PathRecord, Vec<f64>)> =
        (0..cfg.n_paths as u64).into_par_iter().map(|i| simulate_one(fb, cfg, i, &edges)).collect();
    let mut occupation = vec![0.0; cfg.n_bins];
    let mut paths = Vec::with_capacity(results.len());
    for (rec, occ) in results {
        for (o, v) in occupation.iter_mut().zip(&occ) {
            *o += v;
        }
        paths.push(rec);
    }
    Ok(PathEnsemble { paths, occupation, bin_edges: edges, config: cfg.clone() })
}

pub fn simulate_paths(eq: &EquilibriumState, model: &HamiltonianModel, cfg: &SimulationConfig) -> Result<PathEnsemble, SdeError> {
    simulate_feedback(&Feedback::from_equilibrium(eq, model), cfg)
}

/// Mean and standard error of the per-path time-averaged cost over paths that
/// stayed inside.
pub fn estimate_rho(ensemble: &PathEnsemble) -> (f64, f64) {
    let v: Vec<f64> = ensemble.paths.iter().filter(|p| !p.exited).map(|p| p.time_avg_cost).collect();
    if v.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `L1` distance between the occupation histogram and bin averages of `m`.
pub fn compare_invariant_density(ensemble: &PathEnsemble, m: &DensityMeasure) -> f64 {
    let total: f64 = ensemble.occupation.iter().sum();
    if total <= 0.0 {
        return f64::NAN;
    }
    let g = m.grid();
    let nodes = g.nodes();
    let (lo, hi) = (nodes[0], nodes[nodes.len() - 1]);
    let edges = &ensemble.bin_edges;
    let mut gap = 0.0;
    for k in 0..ensemble.occupation.len() {
        let w = edges[k + 1] - edges[k];
        let samples = 32;
        let mut avg = 0.0;
        for s in 0..samples {
            let x = edges[k] + w * (s as f64 + 0.5) / samples as f64;
            if x >= lo && x <= hi {
                avg += g.interpolate(m.density(), x);
            }
        }
        avg /= samples as f64;
        let hist = ensemble.occupation[k] / (total * w);
        gap += (hist - avg).abs() * w;
    }
    gap
}
