//! Hamiltonians of the form `H(p, mu) = f1(mu) |p + f2(mu)|^q + V` and their
//! Lagrangians.
//!
//! ```text
//! Shifted:  f1 = 1,       f2 = phi(mu)
//! Scaled:   f1 = psi(mu), f2 = 0
//! L(alpha, mu) = k f1^(1-q') |alpha|^q' + alpha . f2 - V,   k = q^(1-q') - q^(-q')
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::JointMeasure;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("exponent q = {0} must lie in (1, 2]")]
    BadExponent(f64),
    #[error("diffusion sigma = {0} must be positive")]
    BadSigma(f64),
    #[error("psi rule is not strictly positive and bounded: {0}")]
    BadPsi(String),
    #[error("structural constant C0 = {0} must be positive and finite")]
    BadC0(f64),
    #[error("non-finite coupling parameter: {0}")]
    NonFinite(&'static str),
    #[error("certification needs at least one sample measure and one sample point")]
    EmptySamples,
}

/// Rule for the shift `phi(mu)` of the Shifted family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PhiRule {
    /// `phi(mu) = coeff * (mean control of mu)`.
    Linear { coeff: f64 },
    /// A fixed vector independent of `mu`.
    Fixed { value: Vec<f64> },
}

/// Rule for the scale `psi(mu)` of the Scaled family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PsiRule {
    Constant { value: f64 },
    /// `psi(mu) = floor + amplitude / (1 + Lambda_q'(mu) / scale)`, decreasing in the moment.
    Decreasing { floor: f64, amplitude: f64, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Family {
    Shifted(PhiRule),
    Scaled(PsiRule),
}

#[derive(Debug, Clone)]
pub struct HamiltonianModel {
    family: Family,
    q: f64,
    q_conj: f64,
    v: f64,
    sigma: f64,
    c0: f64,
}

impl HamiltonianModel {
    /// Builds a model and computes its structural constant by sampling.
    pub fn new(family: Family, q: f64, sigma: f64, v: f64) -> Result<Self, ModelError> {
        if !(q > 1.0 && q <= 2.0) {
            return Err(ModelError::BadExponent(q));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ModelError::BadSigma(sigma));
        }
        if !v.is_finite() {
            return Err(ModelError::NonFinite("V"));
        }
        match &family {
            Family::Shifted(PhiRule::Linear { coeff }) if !coeff.is_finite() => {
                return Err(ModelError::NonFinite("phi coefficient"))
            }
            Family::Shifted(PhiRule::Fixed { value }) if value.iter().any(|v| !v.is_finite()) => {
                return Err(ModelError::NonFinite("phi value"))
            }
            Family::Scaled(PsiRule::Constant { value }) if !(*value > 0.0 && value.is_finite()) => {
                return Err(ModelError::BadPsi(format!("constant {value}")))
            }
            Family::Scaled(PsiRule::Decreasing { floor, amplitude, scale })
                if !(*floor > 0.0 && *amplitude >= 0.0 && *scale > 0.0)
                    || !(floor + amplitude).is_finite() =>
            {
                return Err(ModelError::BadPsi(format!(
                    "floor {floor}, amplitude {amplitude}, scale {scale}"
                )))
            }
            _ => {}
        }
        let mut model = Self { family, q, q_conj: q / (q - 1.0), v, sigma, c0: 1.0 };
        model.c0 = structural_constant(&model);
        Ok(model)
    }

    pub fn shifted(q: f64, sigma: f64, coeff: f64, v: f64) -> Result<Self, ModelError> {
        Self::new(Family::Shifted(PhiRule::Linear { coeff }), q, sigma, v)
    }

    pub fn scaled(q: f64, sigma: f64, psi: f64, v: f64) -> Result<Self, ModelError> {
        Self::new(Family::Scaled(PsiRule::Constant { value: psi }), q, sigma, v)
    }

    /// Plain `|p|^q` with unit diffusion shape parameters.
    pub fn pure_power(q: f64, sigma: f64) -> Result<Self, ModelError> {
        Self::scaled(q, sigma, 1.0, 0.0)
    }

    /// Overrides the sampled structural constant.
    pub fn with_c0(mut self, c0: f64) -> Result<Self, ModelError> {
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(ModelError::BadC0(c0));
        }
        self.c0 = c0;
        Ok(self)
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn q_conj(&self) -> f64 {
        self.q_conj
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    /// Coefficient `q^(1-q') - q^(-q')` of the Lagrangian.
    pub fn lagrangian_coefficient(&self) -> f64 {
        self.q.powf(1.0 - self.q_conj) - self.q.powf(-self.q_conj)
    }

    /// True when `H` does not depend on the measure.
    pub fn is_decoupled(&self) -> bool {
        match &self.family {
            Family::Shifted(PhiRule::Linear { coeff }) => *coeff == 0.0,
            Family::Shifted(PhiRule::Fixed { .. }) => true,
            Family::Scaled(PsiRule::Constant { .. }) => true,
            Family::Scaled(PsiRule::Decreasing { amplitude, .. }) => *amplitude == 0.0,
        }
    }

    pub fn f1(&self, mu: &JointMeasure) -> f64 {
        match &self.family {
            Family::Shifted(_) => 1.0,
            Family::Scaled(PsiRule::Constant { value }) => *value,
            Family::Scaled(PsiRule::Decreasing { floor, amplitude, scale }) => {
                floor + amplitude / (1.0 + mu.lambda_r(self.q_conj) / scale)
            }
        }
    }

    pub fn f2(&self, mu: &JointMeasure) -> Vec<f64> {
        match &self.family {
            Family::Shifted(PhiRule::Linear { coeff }) => {
                mu.mean_control().into_iter().map(|m| coeff * m).collect()
            }
            Family::Shifted(PhiRule::Fixed { value }) => value.clone(),
            Family::Scaled(_) => vec![0.0; mu.dim()],
        }
    }

    /// Evaluates all measure-dependent coefficients once.
    pub fn freeze(&self, mu: &JointMeasure) -> FrozenHamiltonian {
        FrozenHamiltonian {
            q: self.q,
            q_conj: self.q_conj,
            k: self.lagrangian_coefficient(),
            f1: self.f1(mu),
            shift: self.f2(mu),
            v: self.v,
        }
    }

    pub fn eval_h(&self, p: &[f64], mu: &JointMeasure) -> f64 {
        self.freeze(mu).h(p)
    }

    pub fn eval_dp_h(&self, p: &[f64], mu: &JointMeasure) -> Vec<f64> {
        self.freeze(mu).dp_h(p)
    }

    pub fn eval_l(&self, alpha: &[f64], mu: &JointMeasure) -> f64 {
        self.freeze(mu).l(alpha)
    }

    pub fn eval_dalpha_l(&self, alpha: &[f64], mu: &JointMeasure) -> Vec<f64> {
        self.freeze(mu).dalpha_l(alpha)
    }
}

/// The Hamiltonian with its measure argument fixed.
#[derive(Debug, Clone)]
pub struct FrozenHamiltonian {
    pub q: f64,
    pub q_conj: f64,
    pub k: f64,
    pub f1: f64,
    pub shift: Vec<f64>,
    pub v: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl FrozenHamiltonian {
    /// Shift component used by one-dimensional solvers.
    pub fn shift1(&self) -> f64 {
        self.shift.first().copied().unwrap_or(0.0)
    }

    pub fn h(&self, p: &[f64]) -> f64 {
        let s: Vec<f64> = p.iter().zip(self.shift.iter().chain(std::iter::repeat(&0.0))).map(|(a, b)| a + b).collect();
        self.f1 * norm(&s).powf(self.q) + self.v
    }

    pub fn dp_h(&self, p: &[f64]) -> Vec<f64> {
        let s: Vec<f64> = p.iter().zip(self.shift.iter().chain(std::iter::repeat(&0.0))).map(|(a, b)| a + b).collect();
        let r = norm(&s);
        if r == 0.0 {
            return vec![0.0; p.len()];
        }
        let c = self.f1 * self.q * r.powf(self.q - 2.0);
        s.iter().map(|x| c * x).collect()
    }

    pub fn l(&self, alpha: &[f64]) -> f64 {
        let lin: f64 = alpha.iter().zip(&self.shift).map(|(a, b)| a * b).sum();
        self.k * self.f1.powf(1.0 - self.q_conj) * norm(alpha).powf(self.q_conj) + lin - self.v
    }

    pub fn dalpha_l(&self, alpha: &[f64]) -> Vec<f64> {
        let r = norm(alpha);
        let c = if r == 0.0 {
            0.0
        } else {
            self.k * self.q_conj * self.f1.powf(1.0 - self.q_conj) * r.powf(self.q_conj - 2.0)
        };
        alpha
            .iter()
            .zip(self.shift.iter().chain(std::iter::repeat(&0.0)))
            .map(|(a, b)| c * a + b)
            .collect()
    }

    /// `f1 |s|^q + V` for a scalar already-shifted momentum.
    #[inline]
    pub fn h_shifted(&self, s: f64) -> f64 {
        self.f1 * s.abs().powf(self.q) + self.v
    }

    /// Derivative of [`Self::h_shifted`].
    #[inline]
    pub fn dh_shifted(&self, s: f64) -> f64 {
        if s == 0.0 {
            0.0
        } else {
            self.f1 * self.q * s.abs().powf(self.q - 1.0) * s.signum()
        }
    }

    #[inline]
    pub fn l1(&self, alpha: f64) -> f64 {
        self.k * self.f1.powf(1.0 - self.q_conj) * alpha.abs().powf(self.q_conj) + alpha * self.shift1() - self.v
    }
}

/// Sampling box used for the structural constant.
const BOX_P: f64 = 100.0;
const BOX_LAMBDA: f64 = 100.0;

/// Smallest `C > 0` with `a C^2 + b C - k >= 0`.
fn min_root(a: f64, b: f64, k: f64) -> f64 {
    if k <= 0.0 && b >= 0.0 {
        return 0.0;
    }
    if a == 0.0 {
        return if b > 0.0 { k / b } else { f64::INFINITY };
    }
    (-b + (b * b + 4.0 * a * k).sqrt()) / (2.0 * a)
}

/// One-dimensional probe measures with prescribed control moments.
fn probe_measures(lambda: f64) -> Vec<JointMeasure> {
    let mk = |a: Vec<f64>| {
        let n = a.len();
        JointMeasure::new(1, vec![0.0; n], a, vec![1.0 / n as f64; n]).expect("probe measure")
    };
    vec![
        mk(vec![lambda]),
        mk(vec![-lambda]),
        mk(vec![lambda, -lambda]),
        mk(vec![0.0, lambda * 2f64.powf(0.5)]),
    ]
}

/// Twice the smallest constant making the growth and coercivity bounds of
/// `H` and `L` hold on `|p|, |alpha| <= 100`, `Lambda_q' <= 100`.
fn structural_constant(model: &HamiltonianModel) -> f64 {
    let qc = model.q_conj;
    let mut c: f64 = 1.0;
    for li in 0..=20 {
        let lambda = BOX_LAMBDA * li as f64 / 20.0;
        for mu in probe_measures(lambda) {
            let lam = mu.lambda_r(qc);
            let lq = lam.powf(qc);
            let fr = model.freeze(&mu);
            for pi in 0..=200 {
                let p = -BOX_P + BOX_P * pi as f64 / 100.0;
                let h = fr.h(&[p]);
                let dh = fr.dp_h(&[p])[0];
                let pq = p.abs().powf(model.q);
                c = c.max(dh.abs() / (1.0 + p.abs().powf(model.q - 1.0) + lam));
                c = c.max(min_root(lq, 1.0 + pq, h.abs()));
                c = c.max(min_root(1.0 + lq, p * dh - h, pq));
                let a = p;
                let l = fr.l(&[a]);
                let aq = a.abs().powf(qc);
                c = c.max(min_root(1.0 + lq, l, aq));
                c = c.max(l.abs() / (1.0 + aq + lq));
            }
        }
    }
    2.0 * c
}

/// Outcome of a single sampled check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Smallest slack observed; negative when violated.
    pub margin: f64,
    pub witness: Option<String>,
}

#[derive(Debug, Clone, Error)]
#[error("assumption `{check}` violated (margin {margin:.3e}): {witness}")]
pub struct CertificationFailure {
    pub check: &'static str,
    pub witness: String,
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct CertificationReport {
    pub c0: f64,
    pub checks: Vec<CheckResult>,
    /// Largest sampled Hölder exponent of the remainder `G` inside the
    /// admissible range, if the range applies.
    pub holder_exponent: Option<f64>,
}

impl CertificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<CertificationFailure> {
        self.checks.iter().find(|c| !c.passed).map(|c| CertificationFailure {
            check: c.name,
            witness: c.witness.clone().unwrap_or_default(),
            margin: c.margin,
        })
    }

    pub fn ensure(&self) -> Result<(), CertificationFailure> {
        match self.first_failure() {
            Some(f) => Err(f),
            None => Ok(()),
        }
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Tracker {
    name: &'static str,
    margin: f64,
    witness: Option<String>,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self { name, margin: f64::INFINITY, witness: None }
    }

    fn record(&mut self, slack: f64, witness: impl FnOnce() -> String) {
        if slack < self.margin {
            self.margin = slack;
            if slack < 0.0 {
                self.witness = Some(witness());
            }
        }
    }

    fn finish(self) -> CheckResult {
        let margin = if self.margin.is_finite() { self.margin } else { 0.0 };
        CheckResult { name: self.name, passed: self.margin >= 0.0, margin, witness: self.witness }
    }
}

fn describe(mu: &JointMeasure) -> String {
    let atoms: Vec<String> = (0..mu.len())
        .map(|i| format!("({:.3}, {:?}, {:.3})", mu.position(i), mu.control(i), mu.weight(i)))
        .collect();
    format!("[{}]", atoms.join(", "))
}

/// `sup_alpha { -alpha p - L(alpha) }` by golden-section search on a concave objective.
fn legendre_sup(fr: &FrozenHamiltonian, p: f64) -> f64 {
    let f = |a: f64| -a * p - fr.l1(a);
    // coarse bracket on a geometric grid
    let mut grid = vec![0.0];
    let mut t = 1e-3;
    while t < 1e7 {
        grid.push(t);
        grid.push(-t);
        t *= 1.5;
    }
    grid.sort_by(f64::total_cmp);
    let (best, _) = grid
        .iter()
        .enumerate()
        .map(|(i, &a)| (i, f(a)))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    let mut lo = grid[best.saturating_sub(1)];
    let mut hi = grid[(best + 1).min(grid.len() - 1)];
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
        if (hi - lo).abs() <= 1e-14 * (1.0 + lo.abs()) {
            break;
        }
    }
    f(0.5 * (lo + hi)).max(f1).max(f2)
}

/// Standard sample battery: one-dimensional measures with up to ten atoms
/// and a symmetric set of momenta.
pub fn default_samples() -> (Vec<JointMeasure>, Vec<Vec<f64>>) {
    let mut measures = Vec::new();
    for &a in &[0.0, 0.5, -1.0, 2.0, -3.5, 6.0] {
        measures.push(JointMeasure::dirac(0.5, vec![a]));
    }
    for n in [2usize, 3, 5, 10] {
        for shift in [-2.0, 0.0, 1.5] {
            let x: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
            let alpha: Vec<f64> = (0..n).map(|i| shift + (i as f64 - 0.4 * n as f64) * 0.8).collect();
            let raw: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
            let total: f64 = raw.iter().sum();
            let w = raw.iter().map(|r| r / total).collect();
            measures.push(JointMeasure::new(1, x, alpha, w).expect("sample measure"));
        }
    }
    let points = (-20..=20).map(|i| vec![i as f64 * 0.75]).collect();
    (measures, points)
}

/// Samples every structural hypothesis on the given measures and points.
pub fn certify_assumptions(
    model: &HamiltonianModel,
    sample_measures: &[JointMeasure],
    sample_points: &[Vec<f64>],
) -> Result<CertificationReport, ModelError> {
    if sample_measures.is_empty() || sample_points.is_empty() {
        return Err(ModelError::EmptySamples);
    }
    let c0 = model.c0;
    let q = model.q;
    let qc = model.q_conj;
    let mut checks = Vec::new();

    let mut duality = Tracker::new("legendre_duality");
    let mut conj = Tracker::new("conjugacy");
    let mut dph = Tracker::new("dph_growth");
    let mut hgrowth = Tracker::new("h_growth");
    let mut coerc = Tracker::new("h_coercivity");
    let mut llow = Tracker::new("l_lower_bound");
    let mut lup = Tracker::new("l_upper_bound");
    let mut strict = Tracker::new("l_strict_convexity");
    let mut theta = Tracker::new("theta_convexity");
    let mut f1pos = Tracker::new("f1_positive");
    let mut cont = Tracker::new("mu_continuity");

    for mu in sample_measures {
        let fr = model.freeze(mu);
        let lam = mu.lambda_r(qc);
        let lq = lam.powf(qc);
        f1pos.record(fr.f1, || format!("f1 = {} at {}", fr.f1, describe(mu)));
        let h0 = fr.h(&[0.0]);
        for th in [0.25, 0.5, 0.75, 1.0] {
            let mut sup = h0 * (1.0 - th);
            for p in sample_points {
                let hp = fr.h(&[th * p[0]]) - th * fr.h(p);
                sup = sup.max(hp);
            }
            let target = (1.0 - th) * h0;
            theta.record(1e-9 * (1.0 + target.abs()) - (sup - target), || {
                format!("theta = {th}: sup {sup} vs {target}")
            });
        }
        for p in sample_points {
            let h = fr.h(p);
            let g = fr.dp_h(p);
            let pn = norm(p);
            let gn = norm(&g);
            let sup = legendre_sup(&fr, p[0]);
            duality.record(1e-6 * (1.0 + h.abs()) - (sup - h).abs(), || {
                format!("p = {p:?}: H = {h}, sup = {sup}")
            });
            let alpha: Vec<f64> = g.iter().map(|x| -x).collect();
            let back = fr.dalpha_l(&alpha);
            let err = back.iter().zip(p).map(|(b, p)| (b + p).abs()).fold(0.0, f64::max);
            conj.record(1e-8 * (1.0 + pn) - err, || format!("p = {p:?}: -DaL(-DpH) = {back:?}"));
            dph.record(c0 * (1.0 + pn.powf(q - 1.0) + lam) - gn, || {
                format!("p = {p:?}: |DpH| = {gn}")
            });
            hgrowth.record(c0 * (1.0 + pn.powf(q) + c0 * lq) - h.abs(), || {
                format!("p = {p:?}: |H| = {}", h.abs())
            });
            let pd: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
            coerc.record(pd - h - (pn.powf(q) / c0 - c0 * (1.0 + lq)), || {
                format!("p = {p:?}: p.DpH - H = {}", pd - h)
            });
            let a = p;
            let l = fr.l(a);
            let an = norm(a).powf(qc);
            llow.record(l - (an / c0 - c0 * (1.0 + lq)), || format!("alpha = {a:?}: L = {l}"));
            lup.record(c0 * (1.0 + an + lq) - l.abs(), || format!("alpha = {a:?}: |L| = {}", l.abs()));
            let b = vec![a[0] + 1.0];
            let mid = vec![a[0] + 0.5];
            let gap = 0.5 * (l + fr.l(&b)) - fr.l(&mid);
            strict.record(if gap > 0.0 { gap } else { -1.0 }, || {
                format!("alpha = {a:?}: midpoint gap {gap}")
            });
            // continuity along control-scaled sequences mu_n -> mu
            let mut last = f64::INFINITY;
            let mut worst: f64 = f64::INFINITY;
            for n in [10.0, 100.0, 1000.0, 10000.0] {
                let mun = mu.scaled_controls(1.0 + 1.0 / n);
                let diff = (model.eval_h(p, &mun) - h).abs();
                worst = worst.min(if diff <= last * (1.0 + 1e-9) + 1e-12 { 1.0 } else { -1.0 });
                last = diff;
            }
            let tail = 1e-3 * (1.0 + h.abs()) - last;
            cont.record(worst.min(tail), || format!("p = {p:?}: |H(mu_n) - H(mu)| = {last}"));
        }
    }
    for t in [duality, conj, dph, hgrowth, coerc, llow, lup, strict, theta, f1pos, cont] {
        checks.push(t.finish());
    }

    // Lagrangian monotonicity and the family-specific coupling monotonicity.
    let mut mono = Tracker::new("lagrangian_monotonicity");
    let mut coupling = Tracker::new("coupling_monotonicity");
    for (i, m1) in sample_measures.iter().enumerate() {
        for m2 in sample_measures.iter().skip(i + 1) {
            let f1 = model.freeze(m1);
            let f2 = model.freeze(m2);
            let integral = |mu: &JointMeasure| -> f64 {
                (0..mu.len()).map(|j| mu.weight(j) * (f1.l(mu.control(j)) - f2.l(mu.control(j)))).sum()
            };
            let val = integral(m1) - integral(m2);
            mono.record(val + 1e-10, || format!("{} vs {}: integral {val}", describe(m1), describe(m2)));
            let slack = match &model.family {
                Family::Shifted(_) => {
                    let d1 = m1.mean_control();
                    let d2 = m2.mean_control();
                    f1.shift.iter().zip(&f2.shift).zip(d1.iter().zip(&d2)).map(|((a, b), (c, d))| (a - b) * (c - d)).sum::<f64>()
                }
                Family::Scaled(_) => {
                    -(f1.f1 - f2.f1) * (m1.lambda_r(qc) - m2.lambda_r(qc))
                }
            };
            coupling.record(slack + 1e-10, || {
                format!("{} vs {}: product {slack}", describe(m1), describe(m2))
            });
        }
    }
    checks.push(mono.finish());
    checks.push(coupling.finish());

    // Hölder regularity of the remainder G = H - f1 |p + f2|^q, which is the
    // constant V for both families.
    let holder_exponent = if q < 2.0 {
        let upper = if q <= 1.5 { 1.0 / (q + 1.0) } else { 2.0 * (q - 1.0) / (q + 1.0) };
        let mut holder = Tracker::new("remainder_holder");
        let mut best = None;
        for k in 1..=20 {
            let a = upper * k as f64 / 21.0;
            let mut ok = true;
            for mu in sample_measures {
                let fr = model.freeze(mu);
                let f3 = fr.v.abs();
                for p1 in sample_points {
                    for p2 in sample_points.iter().step_by(5) {
                        let g1 = fr.h(p1) - fr.f1 * {
                            let s = p1[0] + fr.shift1();
                            s.abs().powf(q)
                        };
                        let g2 = fr.h(p2) - fr.f1 * {
                            let s = p2[0] + fr.shift1();
                            s.abs().powf(q)
                        };
                        let slack = f3 * (p1[0] - p2[0]).abs().powf(a) - (g1 - g2).abs() + 1e-9 * (1.0 + f3);
                        if slack < 0.0 {
                            ok = false;
                        }
                        holder.record(slack, || format!("p1 = {p1:?}, p2 = {p2:?}, exponent {a}"));
                    }
                }
            }
            if ok {
                best = Some(a);
            }
        }
        checks.push(holder.finish());
        best
    } else {
        None
    };

    Ok(CertificationReport { c0, checks, holder_exponent })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty() -> JointMeasure {
        JointMeasure::dirac(0.5, vec![0.0])
    }

    fn fixed_phi(q: f64, phi: f64, v: f64) -> HamiltonianModel {
        HamiltonianModel::new(Family::Shifted(PhiRule::Fixed { value: vec![phi] }), q, 1.0, v).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        assert_eq!(fixed_phi(2.0, 0.0, 0.0).eval_h(&[1.0], &empty()), 1.0);
        assert_eq!(fixed_phi(2.0, 1.0, 0.0).eval_h(&[1.0], &empty()), 4.0);
        let m = HamiltonianModel::scaled(1.5, 1.0, 2.0, 0.0).unwrap();
        assert!((m.eval_h(&[4.0], &empty()) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_examples() {
        let m = HamiltonianModel::new(
            Family::Shifted(PhiRule::Fixed { value: vec![0.0, 0.0] }),
            2.0,
            1.0,
            0.0,
        )
        .unwrap();
        let mu2 = JointMeasure::new(2, vec![0.5], vec![0.0, 0.0], vec![1.0]).unwrap();
        assert_eq!(m.eval_dp_h(&[1.0, 0.0], &mu2), vec![2.0, 0.0]);
        assert_eq!(m.eval_dp_h(&[0.0, 0.0], &mu2), vec![0.0, 0.0]);
        let s = HamiltonianModel::scaled(1.5, 1.0, 1.0, 0.0).unwrap();
        let g = s.eval_dp_h(&[4.0], &empty())[0];
        assert!((g - 3.0).abs() < 1e-12);
        let fd = (s.eval_h(&[4.0 + 1e-6], &empty()) - s.eval_h(&[4.0 - 1e-6], &empty())) / 2e-6;
        assert!((fd - 3.0).abs() < 1e-6);
        let sing = HamiltonianModel::scaled(1.3, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(sing.eval_dp_h(&[0.0], &empty()), vec![0.0]);
    }

    #[test]
    fn lagrangian_examples() {
        assert!((fixed_phi(2.0, 0.0, 0.0).eval_l(&[2.0], &empty()) - 1.0).abs() < 1e-12);
        assert!((fixed_phi(2.0, 0.0, 5.0).eval_l(&[0.0], &empty()) + 5.0).abs() < 1e-12);
        let s = HamiltonianModel::scaled(2.0, 1.0, 1.0, 0.0).unwrap();
        assert!((s.eval_l(&[2.0], &empty()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lagrangian_gradient_examples() {
        let m = fixed_phi(2.0, 0.0, 0.0);
        assert!((m.eval_dalpha_l(&[2.0], &empty())[0] - 1.0).abs() < 1e-12);
        let alpha = m.eval_dp_h(&[3.0], &empty())[0];
        assert_eq!(alpha, 6.0);
        assert!((m.eval_dalpha_l(&[-alpha], &empty())[0] + 3.0).abs() < 1e-12);
        let s = HamiltonianModel::scaled(1.5, 1.0, 1.0, 0.0).unwrap();
        let fd = (s.eval_l(&[1.0 + 1e-6], &empty()) - s.eval_l(&[1.0 - 1e-6], &empty())) / 2e-6;
        assert!((s.eval_dalpha_l(&[1.0], &empty())[0] - fd).abs() < 1e-6);
    }

    #[test]
    fn monotone_coupling_certifies() {
        let m = HamiltonianModel::shifted(2.0, 1.0, 0.5, 0.0).unwrap();
        let (mus, pts) = default_samples();
        let rep = certify_assumptions(&m, &mus, &pts).unwrap();
        assert!(rep.passed(), "{:?}", rep.first_failure());
    }

    #[test]
    fn sign_flipped_coupling_fails_with_witness() {
        let m = HamiltonianModel::shifted(2.0, 1.0, -0.5, 0.0).unwrap();
        let (mus, pts) = default_samples();
        let rep = certify_assumptions(&m, &mus, &pts).unwrap();
        let c = rep.check("coupling_monotonicity").unwrap();
        assert!(!c.passed);
        assert!(c.margin < 0.0);
        assert!(c.witness.as_deref().unwrap_or("").contains("product"));
        assert!(!rep.check("lagrangian_monotonicity").unwrap().passed);
    }

    #[test]
    fn theta_identity_at_one() {
        let m = HamiltonianModel::shifted(1.5, 1.0, 0.3, 2.0).unwrap();
        let (mus, pts) = default_samples();
        let rep = certify_assumptions(&m, &mus, &pts).unwrap();
        assert!(rep.check("theta_convexity").unwrap().passed);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(HamiltonianModel::shifted(3.0, 1.0, 0.0, 0.0).unwrap_err(), ModelError::BadExponent(3.0));
        assert!(HamiltonianModel::shifted(1.0, 1.0, 0.0, 0.0).is_err());
        assert!(HamiltonianModel::scaled(2.0, 1.0, -1.0, 0.0).is_err());
        assert!(HamiltonianModel::scaled(2.0, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn conjugate_exponent_cached() {
        for q in [1.1, 1.25, 1.5, 1.75, 2.0] {
            let m = HamiltonianModel::pure_power(q, 1.0).unwrap();
            assert!((m.q_conj() - q / (q - 1.0)).abs() < 1e-15);
        }
    }
}
