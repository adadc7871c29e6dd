//! Oracle suites: Monte-Carlo and finite-difference checks of the closed
//! forms, analytic solver checks and simulator sanity checks. Each check
//! reports the measured error against its tolerance.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::{CostFeature, CostKind, CostSpec};
use crate::dynamics::{LinearGaussianDynamics, MomentDynamics};
use crate::env::{CartPoleParams, DoublePendulumParams, EnvConstraint, Environment};
use crate::moments::GaussState;
use crate::planner::{
    adjoint_pass, constraint_values, cost_gradient, rollout, solve, ChanceConstraint, ConstraintMode, Direction,
    PlanProblem, SolveOptions, SolveStatus,
};
use crate::testing::{
    fd_jacobian, mc_cost_samples, mc_propagate, random_gauss_state, random_spd, random_transition_model, rel_err,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    #[value(name = "moment_matching")]
    MomentMatching,
    #[value(name = "gradients")]
    Gradients,
    #[value(name = "costs")]
    Costs,
    #[value(name = "solver")]
    Solver,
    #[value(name = "envs")]
    Envs,
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured ≤ tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Check {
            name: name.into(),
            measured: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            passed: ok,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn push(&mut self, c: Check) {
        self.checks.push(c);
    }

    /// Largest measured value among checks whose name starts with `prefix`.
    pub fn worst(&self, prefix: &str) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .map(|c| c.measured)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<48} measured {:>11.3e}  tolerance {:>9.1e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance
            )?;
        }
        let failed = self.failures().len();
        writeln!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

pub fn run_suite(suite: Suite) -> Report {
    match suite {
        Suite::MomentMatching => moment_matching(20, 100_000, 1),
        Suite::Gradients => gradients(10, 2),
        Suite::Costs => costs(20, 1_000_000, 3),
        Suite::Solver => solver(),
        Suite::Envs => envs(),
    }
}

fn z_scores(analytic: f64, estimate: f64, se: f64) -> f64 {
    let d = (analytic - estimate).abs();
    if d <= 1e-12 {
        0.0
    } else {
        d / se.max(1e-300)
    }
}

/// Propagated moments against Monte Carlo on random GP instances; one check
/// per instance holding the largest z-score over all mean and covariance
/// entries.
pub fn moment_matching(instances: usize, samples: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();
    for i in 0..instances {
        let n = rng.random_range(5..=30);
        let d = rng.random_range(1..=3);
        let u = rng.random_range(1..=2);
        let model = random_transition_model(&mut rng, n, d, u);
        let z = random_gauss_state(&mut rng, d, 0.5);
        let uv = DVector::from_fn(u, |_, _| rng.random_range(-1.0..1.0));
        let name = format!("mm[{i}] N={n} D={d} U={u}");
        match model.propagate(&z, &uv) {
            Ok(next) => {
                let mc = mc_propagate(&model, &z, &uv, samples, &mut rng);
                let mut zmax: f64 = 0.0;
                for a in 0..d {
                    zmax = zmax.max(z_scores(next.mean[a], mc.mean[a], mc.mean_se[a]));
                    for b in a..d {
                        zmax = zmax.max(z_scores(next.cov[(a, b)], mc.cov[(a, b)], mc.cov_se[(a, b)]));
                    }
                }
                report.push(Check::at_most(format!("{name} worst z"), zmax, 3.0));
            }
            Err(e) => report.push(Check::flag(format!("{name}: {e}"), false)),
        }
    }
    report
}

fn saturating_problem<'a>(model: &'a dyn MomentDynamics, rng: &mut ChaCha8Rng, h: usize) -> PlanProblem<'a> {
    let d = model.state_dim();
    let u = model.control_dim();
    PlanProblem {
        initial: random_gauss_state(rng, d, 0.3),
        horizon: h,
        control_bounds: vec![(-2.0, 2.0); u],
        state_constraints: vec![],
        cost: CostSpec::saturating(
            CostFeature::RawState,
            DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
            rng.random_range(0.5..1.5),
            DMatrix::identity(u, u) * 0.05,
        )
        .expect("valid cost"),
        model,
        warm_start: None,
    }
}

fn flat(c: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(c.len(), (0..c.nrows()).flat_map(|t| c.row(t).iter().copied().collect::<Vec<_>>()))
}

fn unflat(v: &DVector<f64>, h: usize, u: usize) -> DMatrix<f64> {
    DMatrix::from_fn(h, u, |t, k| v[t * u + k])
}

fn cost_to_go(p: &PlanProblem, controls: &DMatrix<f64>, t: usize, z: GaussState) -> f64 {
    let mut z = z;
    let mut j = 0.0;
    for s in t..p.horizon {
        let u = controls.row(s).transpose();
        j += p.cost.stage(&z, &u).map(|c| c.value).unwrap_or(f64::NAN);
        z = match p.model.propagate(&z, &u) {
            Ok(n) => n,
            Err(_) => return f64::NAN,
        };
    }
    j + p.cost.terminal(&z).map(|c| c.value).unwrap_or(f64::NAN)
}

/// Control gradients and co-states against central differences of `J`.
pub fn gradients(instances: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();
    let h = 5;
    for i in 0..instances {
        let n = rng.random_range(10..=25);
        let d = rng.random_range(1..=3);
        let u = rng.random_range(1..=2);
        let model = random_transition_model(&mut rng, n, d, u);
        let p = saturating_problem(&model, &mut rng, h);
        let c = DMatrix::from_fn(h, u, |_, _| rng.random_range(-1.0..1.0));
        let name = format!("grad[{i}] D={d} U={u}");
        let result = (|| -> crate::Result<(f64, f64)> {
            let g = cost_gradient(&p, &c)?;
            let fd = fd_jacobian(
                |v| DVector::from_element(1, rollout(&p, &unflat(v, h, u)).map(|r| r.1).unwrap_or(f64::NAN)),
                &flat(&c),
                1e-5,
            );
            let an = DMatrix::from_row_slice(1, h * u, flat(&g).as_slice());
            let eg = rel_err(&an, &fd, 1e-8);
            let (traj, _) = rollout(&p, &c)?;
            let lam = adjoint_pass(&p, &c, &traj)?;
            let mut el: f64 = 0.0;
            for t in 1..=h {
                let f = fd_jacobian(
                    |x| DVector::from_element(1, cost_to_go(&p, &c, t, GaussState::from_flat(x, d))),
                    &traj[t].to_flat(),
                    1e-5,
                );
                let a = DMatrix::from_row_slice(1, lam[t - 1].len(), lam[t - 1].as_slice());
                el = el.max(rel_err(&a, &f, 1e-8));
            }
            Ok((eg, el))
        })();
        match result {
            Ok((eg, el)) => {
                report.push(Check::at_most(format!("{name} dJ/du rel err"), eg, 1e-4));
                report.push(Check::at_most(format!("{name} co-state rel err"), el, 1e-4));
            }
            Err(e) => report.push(Check::flag(format!("{name}: {e}"), false)),
        }
    }
    report
}

fn random_cost(rng: &mut ChaCha8Rng, kind: CostKind, feature: CostFeature, d: usize) -> CostSpec {
    let p = feature.output_dim(d);
    let target = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
    let r = random_spd(rng, 1, 0.1, 1e-3);
    match kind {
        CostKind::Quadratic => CostSpec::quadratic(feature, target, random_spd(rng, p, 0.7, 0.1), r),
        CostKind::Saturating => CostSpec::saturating(feature, target, rng.random_range(0.3..1.0), r),
    }
    .expect("valid cost")
}

/// Expected costs against Monte Carlo and their derivatives against
/// central differences.
pub fn costs(instances: usize, samples: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();
    let features = [
        CostFeature::RawState,
        CostFeature::CartPoleTip { length: 0.5 },
        CostFeature::DoublePendulumTip { lengths: [1.0, 1.0] },
    ];
    for i in 0..instances {
        for kind in [CostKind::Quadratic, CostKind::Saturating] {
            let feature = features[i % features.len()].clone();
            let d = match feature {
                CostFeature::RawState => rng.random_range(1..=3),
                _ => 4,
            };
            let spec = random_cost(&mut rng, kind, feature, d);
            let z = random_gauss_state(&mut rng, d, 0.4);
            let u = DVector::from_element(1, rng.random_range(-1.0..1.0));
            let name = format!("cost[{i}] {kind:?} {}", match spec.feature {
                CostFeature::RawState => "raw",
                CostFeature::CartPoleTip { .. } => "cart-pole tip",
                CostFeature::DoublePendulumTip { .. } => "pendulum tip",
            });
            let Ok(ec) = spec.stage(&z, &u) else {
                report.push(Check::flag(format!("{name}: evaluation failed"), false));
                continue;
            };
            let vals = mc_cost_samples(&spec, &z, &u, samples, &mut rng).expect("valid samples");
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
            report.push(Check::at_most(format!("{name} MC z"), z_scores(ec.value, m, (var / n).sqrt()), 3.0));
            let fz = fd_jacobian(
                |x| DVector::from_element(1, spec.stage(&GaussState::from_flat(x, d), &u).map(|c| c.value).unwrap_or(f64::NAN)),
                &z.to_flat(),
                1e-5,
            );
            let gz = ec.flat_state_gradient();
            let ez = rel_err(&DMatrix::from_row_slice(1, gz.len(), gz.as_slice()), &fz, 1e-8);
            let fu = fd_jacobian(
                |v| DVector::from_element(1, spec.stage(&z, v).map(|c| c.value).unwrap_or(f64::NAN)),
                &u,
                1e-5,
            );
            let eu = rel_err(&DMatrix::from_row_slice(1, 1, ec.dcontrol.as_slice()), &fu, 1e-8);
            report.push(Check::at_most(format!("{name} d/dz rel err"), ez, 1e-4));
            report.push(Check::at_most(format!("{name} d/du rel err"), eu, 1e-4));
        }
    }
    report
}

fn integrator_problem(dynm: &LinearGaussianDynamics, h: usize, target: f64, r: f64, bounds: (f64, f64)) -> PlanProblem<'_> {
    PlanProblem {
        initial: GaussState::point(DVector::from_element(1, 0.0)),
        horizon: h,
        control_bounds: vec![bounds],
        state_constraints: vec![],
        cost: CostSpec::quadratic(
            CostFeature::RawState,
            DVector::from_element(1, target),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1) * r,
        )
        .expect("valid cost"),
        model: dynm,
        warm_start: None,
    }
}

/// Minimizer of `Σ_{t=1..H} (x_t − g)² + r Σ u_t²` for `x_{t+1} = x_t + u_t`,
/// `x_0 = 0`, by solving the normal equations.
pub fn integrator_optimum(h: usize, g: f64, r: f64) -> DVector<f64> {
    let l = DMatrix::from_fn(h, h, |t, s| if s <= t { 1.0 } else { 0.0 });
    let q = l.transpose() * &l + DMatrix::identity(h, h) * r;
    let rhs = l.transpose() * DVector::from_element(h, g);
    q.lu().solve(&rhs).expect("positive definite normal equations")
}

/// Analytic-optimum, active-bound and binding-constraint checks.
pub fn solver() -> Report {
    let mut report = Report::default();
    let opts = SolveOptions::default();
    let dynm = LinearGaussianDynamics::integrator(1);

    let p = integrator_problem(&dynm, 6, 1.5, 0.3, (-100.0, 100.0));
    match solve(&p, &opts) {
        Ok(sol) => {
            let err = (sol.controls.column(0) - integrator_optimum(6, 1.5, 0.3)).amax();
            report.push(Check::at_most("unconstrained optimum max abs error", err, 1e-5));
        }
        Err(e) => report.push(Check::flag(format!("unconstrained optimum: {e}"), false)),
    }

    let p = integrator_problem(&dynm, 1, 50.0, 0.0, (-1.0, 1.0));
    match solve(&p, &opts) {
        Ok(sol) => report.push(Check::at_most("active bound |u − hi|", (sol.controls[(0, 0)] - 1.0).abs(), 0.0)),
        Err(e) => report.push(Check::flag(format!("active bound: {e}"), false)),
    }

    let noisy = LinearGaussianDynamics::new(
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DMatrix::identity(1, 1) * 0.01,
    )
    .expect("valid dynamics");
    let mut p = integrator_problem(&noisy, 5, 2.0, 0.01, (-1.0, 1.0));
    p.state_constraints = vec![ChanceConstraint {
        state_index: 0,
        bound: 1.0,
        direction: Direction::Upper,
        confidence: 0.95,
        mode: ConstraintMode::Chance,
    }];
    match solve(&p, &opts).and_then(|sol| Ok((constraint_values(&p, &sol.trajectory)?, sol.status))) {
        Ok((slacks, status)) => {
            report.push(Check::at_most("binding chance constraint −min slack", -slacks.min(), 1e-6));
            report.push(Check::at_most("binding chance constraint min slack", slacks.min(), 1e-4));
            report.push(Check::flag("binding chance constraint converged", status == SolveStatus::Converged));
        }
        Err(e) => report.push(Check::flag(format!("binding chance constraint: {e}"), false)),
    }
    report
}

/// Simulator sanity: equilibria, energy conservation, constraints and
/// success geometry.
pub fn envs() -> Report {
    let mut report = Report::default();
    let cp = Environment::CartPole(CartPoleParams::default());
    let dp = Environment::DoublePendulum(DoublePendulumParams::default());
    for (name, env) in [("cart-pole", &cp), ("double pendulum", &dp)] {
        let u = vec![0.0; env.control_dim()];
        let x = env.step_deterministic(&[0.0; 4], &u).map(|x| x.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        report.push(Check::at_most(format!("{name} equilibrium drift"), x.unwrap_or(f64::INFINITY), 1e-10));
    }
    let p = CartPoleParams {
        friction: 0.0,
        dt: 0.01,
        ..CartPoleParams::default()
    };
    let env = Environment::CartPole(p.clone());
    let mut x = vec![0.1, 0.3, 2.0, -1.0];
    let e0 = p.energy(&x);
    for _ in 0..100 {
        x = env.step_deterministic(&x, &[0.0]).expect("finite step");
    }
    report.push(Check::at_most("cart-pole energy drift (relative)", ((p.energy(&x) - e0) / e0).abs(), 1e-4));
    let wall = EnvConstraint::cart_wall();
    report.push(Check::flag("wall: −0.69 m admissible", wall.check(&[-0.69, 0.0, 0.0, 0.0])));
    report.push(Check::flag("wall: −0.71 m violated", !wall.check(&[-0.71, 0.0, 0.0, 0.0])));
    let up = [0.0, 0.0, std::f64::consts::PI, 0.0];
    report.push(Check::flag("upright cart-pole counts as success", cp.is_success_state(&up).unwrap_or(false)));
    report.push(Check::flag("hanging cart-pole does not", !cp.is_success_state(&[0.0; 4]).unwrap_or(true)));
    report.push(Check::flag(
        "tip exactly 8 cm away does not",
        !cp.is_success_state(&[0.08, 0.0, std::f64::consts::PI, 0.0]).unwrap_or(true),
    ));
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(solver().passed(), "{}", solver());
        assert!(envs().passed(), "{}", envs());
        let g = gradients(2, 5);
        assert!(g.passed(), "{g}");
        let c = costs(3, 20_000, 6);
        assert!(c.passed(), "{c}");
        let m = moment_matching(2, 20_000, 7);
        assert!(m.passed(), "{m}");
    }

    #[test]
    fn report_formatting() {
        let mut r = Report::default();
        r.push(Check::at_most("a", 0.5, 1.0));
        r.push(Check::at_most("b", 2.0, 1.0));
        assert!(!r.passed());
        assert_eq!(r.worst("a"), 0.5);
        let text = r.to_string();
        assert!(text.contains("PASS a") && text.contains("FAIL b") && text.contains("1 failed"));
    }
}
