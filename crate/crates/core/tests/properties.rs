//! Property tests for solver invariants.

use std::f64::consts::PI;
use std::sync::Arc;

use mfgc::domain::{GridDomain, ScalarField};
use mfgc::fp::{drift_from_gradient, null_vector_density, solve_fp_1d, zero_flux_density, DriftField};
use mfgc::hjb::{solve_ergodic, BoundaryData, DiscountSchedule, HjbOptions};
use mfgc::measure::{transport_distance_1d, DensityMeasure, JointMeasure};
use mfgc::mfgc::{solve_equilibrium, EquilibriumOptions, FRule};
use mfgc::model::HamiltonianModel;
use mfgc::sde::{simulate_paths, SimulationConfig};
use proptest::prelude::*;

fn grid(n: usize) -> Arc<GridDomain> {
    Arc::new(GridDomain::clustered(0.0, 1.0, n).unwrap())
}

fn atoms(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-5.0..5.0f64, n), prop::collection::vec(0.01..1.0f64, n))
}

fn measure(alpha: Vec<f64>, raw: &[f64]) -> JointMeasure {
    let n = alpha.len();
    let x = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let total: f64 = raw.iter().sum();
    JointMeasure::new(1, x, alpha, raw.iter().map(|w| w / total).collect()).unwrap()
}

fn solve(model: &HamiltonianModel, n: usize, f: f64, opts: &HjbOptions, schedule: &DiscountSchedule) -> mfgc::hjb::HJBSolution {
    let g = grid(n);
    let mu = JointMeasure::dirac(0.5, vec![0.0]);
    solve_ergodic(model, &mu, &ScalarField::constant(g, f), &BoundaryData::default(), schedule, opts, None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn grid_nodes_are_symmetric_and_inside(n in 16usize..600, a in -3.0..3.0f64, len in 0.1..10.0f64) {
        let g = GridDomain::clustered(a, a + len, n).unwrap();
        let x = g.nodes();
        prop_assert!(x.windows(2).all(|w| w[1] > w[0]));
        prop_assert!((x[0] - a - g.delta()).abs() <= 1e-12 * len);
        for i in 0..n {
            prop_assert!((x[i] - a - (a + len - x[n - 1 - i])).abs() <= 1e-9 * len);
        }
        prop_assert!(g.distances().iter().all(|d| *d >= g.delta() - 1e-12 * (a.abs() + len)));
    }

    #[test]
    fn lambda_is_monotone_in_the_exponent((alpha, w) in atoms(7), r in 1.0..4.0f64, s in 0.0..3.0f64) {
        let mu = measure(alpha, &w);
        prop_assert!(mu.lambda_r(r) <= mu.lambda_r(r + s) * (1.0 + 1e-12) + 1e-300);
        prop_assert!(mu.lambda_r(r + s) <= mu.lambda_r(f64::INFINITY) * (1.0 + 1e-12));
    }

    #[test]
    fn lambda_is_absolutely_homogeneous((alpha, w) in atoms(6), c in -4.0..4.0f64, r in 1.0..4.0f64) {
        let mu = measure(alpha, &w);
        let lhs = mu.scaled_controls(c).lambda_r(r);
        prop_assert!((lhs - c.abs() * mu.lambda_r(r)).abs() <= 1e-10 * (1.0 + lhs));
    }

    #[test]
    fn transport_distance_is_a_metric(a in atoms(5), b in prop::collection::vec(-5.0..5.0f64, 5), c in prop::collection::vec(-5.0..5.0f64, 5)) {
        let m1 = measure(a.0.clone(), &a.1);
        let m2 = m1.with_controls(b);
        let m3 = m1.with_controls(c);
        prop_assert_eq!(transport_distance_1d(&m1, &m1), 0.0);
        let d12 = transport_distance_1d(&m1, &m2);
        prop_assert!((d12 - transport_distance_1d(&m2, &m1)).abs() <= 1e-14 * (1.0 + d12));
        prop_assert!(d12 <= transport_distance_1d(&m1, &m3) + transport_distance_1d(&m3, &m2) + 1e-12);
    }

    #[test]
    fn blending_moves_a_fraction_of_the_distance(a in atoms(6), b in prop::collection::vec(-5.0..5.0f64, 6), omega in 0.0..1.0f64) {
        let m1 = measure(a.0.clone(), &a.1);
        let m2 = m1.with_controls(b);
        let mid = m1.blend(&m2, omega);
        let full = transport_distance_1d(&m1, &m2);
        prop_assert!((transport_distance_1d(&m1, &mid) - omega * full).abs() <= 1e-12 * (1.0 + full));
        prop_assert!((mid.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn density_is_nonnegative_with_unit_mass(q in 1.2..=2.0f64, sigma in 0.3..3.0f64, tilt in -3.0..3.0f64) {
        let model = HamiltonianModel::pure_power(q, sigma).unwrap();
        let g = grid(256);
        let gamma = sigma * model.q_conj();
        let b = DriftField::from_fn(g.clone(), |x| gamma * (1.0 / (1.0 - x) - 1.0 / x) + tilt).unwrap();
        let m = solve_fp_1d(&model, &b).unwrap();
        prop_assert!(m.density().iter().all(|v| *v >= 0.0));
        prop_assert!((m.total_mass() - 1.0).abs() <= 1e-12);
        let nv = null_vector_density(&b, sigma).unwrap();
        prop_assert!(mfgc::fp::l1_difference(&m, &nv) <= 1e-2);
    }

    #[test]
    fn rho_does_not_depend_on_the_normalization_node(q in 1.3..=2.0f64, k in 2usize..254) {
        let model = HamiltonianModel::pure_power(q, 1.0).unwrap();
        let base = solve(&model, 256, 0.0, &HjbOptions::default(), &DiscountSchedule::Direct);
        let moved = HjbOptions { normalization: Some(k), ..HjbOptions::default() };
        let other = solve(&model, 256, 0.0, &moved, &DiscountSchedule::Direct);
        prop_assert!((base.rho - other.rho).abs() <= 1e-8 * base.rho.abs().max(1.0));
        prop_assert!(other.u.values()[k].abs() <= 1e-12);
        let shift = base.u.values()[k];
        let gap = base.u.values().iter().zip(other.u.values()).map(|(a, b)| (a - shift - b).abs()).fold(0.0, f64::max);
        prop_assert!(gap <= 1e-6 * (1.0 + shift.abs()));
    }

    #[test]
    fn constant_source_shifts_rho(q in 1.3..=2.0f64, c in -20.0..20.0f64) {
        let model = HamiltonianModel::pure_power(q, 1.0).unwrap();
        let opts = HjbOptions::default();
        let r0 = solve(&model, 256, 0.0, &opts, &DiscountSchedule::Direct).rho;
        let r1 = solve(&model, 256, c, &opts, &DiscountSchedule::Direct).rho;
        prop_assert!((r1 - r0 - c).abs() <= 1e-8 * (1.0 + r0.abs() + c.abs()));
    }

    #[test]
    fn homotopy_and_direct_agree(q in 1.3..=2.0f64, sigma in 0.5..2.0f64) {
        let model = HamiltonianModel::pure_power(q, sigma).unwrap();
        let opts = HjbOptions::default();
        let h = solve(&model, 256, 0.0, &opts, &DiscountSchedule::default_homotopy());
        let d = solve(&model, 256, 0.0, &opts, &DiscountSchedule::Direct);
        prop_assert!((h.rho - d.rho).abs() <= 1e-6 * d.rho.abs().max(1.0));
    }

    #[test]
    fn value_function_is_minimal_inside(q in 1.3..=2.0f64, psi in 0.5..2.0f64) {
        let model = HamiltonianModel::scaled(q, 1.0, psi, 0.0).unwrap();
        let sol = solve(&model, 256, 0.0, &HjbOptions::default(), &DiscountSchedule::Direct);
        let u = sol.u.values();
        let n = u.len();
        let argmin = (0..n).min_by(|&i, &j| u[i].total_cmp(&u[j])).unwrap();
        prop_assert!(argmin > n / 8 && argmin < n - n / 8);
        prop_assert!(u[0] > u[argmin] && u[n - 1] > u[argmin]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn rho_increases_with_the_source(q in 1.4..=2.0f64, strength in 0.0..2.0f64, extra in 0.01..1.0f64) {
        let model = HamiltonianModel::pure_power(q, 1.0).unwrap();
        let g = grid(256);
        let opts = EquilibriumOptions::default();
        let f = |offset: f64| FRule::GaussianConvolution { strength, width: 0.2, offset };
        let lo = solve_equilibrium(&model, &f(0.0), &g, &opts, None).unwrap();
        let hi = solve_equilibrium(&model, &f(extra), &g, &opts, None).unwrap();
        prop_assert!(hi.rho > lo.rho);
        prop_assert!((hi.rho - lo.rho - extra).abs() <= 1e-5 * (1.0 + lo.rho.abs()));
    }

    #[test]
    fn simulation_is_deterministic_given_a_seed(seed in 0u64..1000) {
        let model = HamiltonianModel::shifted(2.0, 1.0, 0.0, 0.0).unwrap();
        let eq = solve_equilibrium(&model, &FRule::default(), &grid(128), &EquilibriumOptions::default(), None).unwrap();
        let cfg = SimulationConfig { n_paths: 4, horizon: 2.0, seed, ..SimulationConfig::default() };
        let a = simulate_paths(&eq, &model, &cfg).unwrap();
        let b = simulate_paths(&eq, &model, &cfg).unwrap();
        prop_assert_eq!(a.occupation, b.occupation);
        for (p, r) in a.paths.iter().zip(&b.paths) {
            prop_assert_eq!(p.time_avg_cost.to_bits(), r.time_avg_cost.to_bits());
            prop_assert_eq!(p.steps, r.steps);
        }
    }
}

#[test]
fn density_converges_at_second_order() {
    let model = HamiltonianModel::shifted(2.0, 1.0, 0.0, 0.0).unwrap();
    let errors: Vec<f64> = [64usize, 128, 256]
        .iter()
        .map(|&n| {
            let g = Arc::new(GridDomain::clustered(0.0, 1.0, n).unwrap());
            let f = ScalarField::constant(g.clone(), 0.0);
            let mu = JointMeasure::dirac(0.5, vec![0.0]);
            let opts = HjbOptions { singular_subtraction: false, ..HjbOptions::default() };
            let sol = solve_ergodic(&model, &mu, &f, &BoundaryData::default(), &DiscountSchedule::Direct, &opts, None).unwrap();
            let b = drift_from_gradient(&model, &mu, &sol.grad_u).unwrap();
            let m: DensityMeasure = zero_flux_density(&b, 1.0).unwrap();
            let w = g.trapezoid_weights();
            g.nodes()
                .iter()
                .zip(m.density())
                .zip(&w)
                .map(|((x, v), w)| w * (v - 2.0 * (PI * x).sin().powi(2)).abs())
                .sum::<f64>()
        })
        .collect();
    for k in 0..errors.len() - 1 {
        let order = (errors[k] / errors[k + 1]).log2();
        assert!(order >= 1.5, "errors {errors:?}");
    }
}
