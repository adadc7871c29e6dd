//! Ground-truth simulators: cart-pole and double pendulum.
//!
//! Angles are measured from the downward position. Cart-pole states are
//! `[x, ẋ, θ, θ̇]` with a uniform rod of length `l` on the cart; the tip sits
//! at `(x + l sin θ, −l cos θ)`. Double-pendulum states are
//! `[θ₁, θ₂, θ̇₁, θ̇₂]` with absolute link angles and uniform rods; the
//! outer tip sits at `(l₁ sin θ₁ + l₂ sin θ₂, −l₁ cos θ₁ − l₂ cos θ₂)`.
//! Control `u₁` is the shoulder torque and `u₂` the elbow torque, so the
//! inner link feels `u₁ − u₂`.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cost::CostFeature;
use crate::dynamics::MomentDynamics;
use crate::error::{Error, Result};
use crate::moments::GaussState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartPoleParams {
    pub pendulum_length: f64,
    pub cart_mass: f64,
    pub pendulum_mass: f64,
    pub gravity: f64,
    /// Viscous cart friction, N·s/m.
    pub friction: f64,
    pub force_range: [f64; 2],
    pub dt: f64,
    pub noise_std: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            pendulum_length: 0.5,
            cart_mass: 0.5,
            pendulum_mass: 0.5,
            gravity: 9.81,
            friction: 0.1,
            force_range: [-10.0, 10.0],
            dt: 0.1,
            noise_std: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoublePendulumParams {
    pub link_lengths: [f64; 2],
    pub link_masses: [f64; 2],
    pub gravity: f64,
    /// Same range for both joints.
    pub torque_range: [f64; 2],
    pub dt: f64,
    pub noise_std: f64,
}

impl Default for DoublePendulumParams {
    fn default() -> Self {
        DoublePendulumParams {
            link_lengths: [1.0, 1.0],
            link_masses: [0.5, 0.5],
            gravity: 9.81,
            torque_range: [-2.0, 2.0],
            dt: 0.05,
            noise_std: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConstraint {
    /// Violated iff the cart position is at or beyond the wall.
    CartWall { wall_position: f64 },
    /// Inner-link angle must stay in the closed interval `[lower, upper]`
    /// (radians, modulo 2π).
    AngleRange { lower: f64, upper: f64 },
}

impl EnvConstraint {
    pub fn cart_wall() -> Self {
        EnvConstraint::CartWall { wall_position: -0.70 }
    }

    /// 340° of travel that excludes the band just clockwise of upright.
    pub fn arm_range() -> Self {
        EnvConstraint::AngleRange {
            lower: (-150.0f64).to_radians(),
            upper: 190.0f64.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EnvConstraint::CartWall { wall_position } if !wall_position.is_finite() => {
                Err(Error::Config("wall position must be finite".into()))
            }
            EnvConstraint::AngleRange { lower, upper } if !(lower < upper && upper - lower < TAU) => Err(
                Error::Config(format!("angle range [{lower}, {upper}] must be non-empty and shorter than 2π")),
            ),
            _ => Ok(()),
        }
    }

    /// `true` when `state` is admissible.
    pub fn check(&self, state: &[f64]) -> bool {
        match *self {
            EnvConstraint::CartWall { wall_position } => state[0] > wall_position,
            EnvConstraint::AngleRange { lower, upper } => {
                let w = lower + (state[0] - lower).rem_euclid(TAU);
                // a value that wraps to just below `lower + 2π` may be `lower` itself
                w <= upper || (w - TAU - lower).abs() < 1e-12
            }
        }
    }

    /// Index and direction of the planner-side bound that keeps the state
    /// admissible, for the wall.
    pub fn planner_bound(&self) -> Option<(usize, f64)> {
        match *self {
            EnvConstraint::CartWall { wall_position } => Some((0, wall_position)),
            EnvConstraint::AngleRange { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[serde(rename = "cartpole")]
    CartPole,
    DoublePendulum,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Environment {
    CartPole(CartPoleParams),
    DoublePendulum(DoublePendulumParams),
}

fn rk4<F: Fn(&[f64; 4]) -> [f64; 4]>(f: F, x: &[f64; 4], dt: f64) -> [f64; 4] {
    let add = |a: &[f64; 4], k: &[f64; 4], s: f64| std::array::from_fn(|i| a[i] + s * k[i]);
    let k1 = f(x);
    let k2 = f(&add(x, &k1, 0.5 * dt));
    let k3 = f(&add(x, &k2, 0.5 * dt));
    let k4 = f(&add(x, &k3, dt));
    std::array::from_fn(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

impl CartPoleParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.pendulum_length, self.cart_mass, self.pendulum_mass, self.dt];
        if pos.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("cart-pole masses, length and dt must be positive".into()));
        }
        if !(self.force_range[0] < self.force_range[1]) {
            return Err(Error::Config("cart-pole force range must satisfy lo < hi".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.friction >= 0.0) || !self.gravity.is_finite() {
            return Err(Error::Config("cart-pole noise, friction and gravity must be valid".into()));
        }
        Ok(())
    }

    fn deriv(&self, x: &[f64; 4], f: f64) -> [f64; 4] {
        let (l, big_m, m, g, b) = (
            self.pendulum_length,
            self.cart_mass,
            self.pendulum_mass,
            self.gravity,
            self.friction,
        );
        let (v, th, w) = (x[1], x[2], x[3]);
        let (s, c) = th.sin_cos();
        let total = big_m + m;
        let acc = (2.0 * m * l * w * w * s + 3.0 * m * g * s * c + 4.0 * (f - b * v)) / (4.0 * total - 3.0 * m * c * c);
        let alpha = -(3.0 * m * l * w * w * s * c + 6.0 * total * g * s + 6.0 * (f - b * v) * c)
            / (4.0 * l * total - 3.0 * m * l * c * c);
        [v, acc, w, alpha]
    }

    /// Kinetic plus potential energy.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let (l, m) = (self.pendulum_length, self.pendulum_mass);
        let (v, th, w) = (x[1], x[2], x[3]);
        0.5 * (self.cart_mass + m) * v * v + 0.5 * m * l * th.cos() * v * w + m * l * l * w * w / 6.0
            - 0.5 * m * self.gravity * l * th.cos()
    }
}

impl DoublePendulumParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.link_lengths[0],
            self.link_lengths[1],
            self.link_masses[0],
            self.link_masses[1],
            self.dt,
        ];
        if pos.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("double-pendulum masses, lengths and dt must be positive".into()));
        }
        if !(self.torque_range[0] < self.torque_range[1]) {
            return Err(Error::Config("double-pendulum torque range must satisfy lo < hi".into()));
        }
        if !(self.noise_std >= 0.0) || !self.gravity.is_finite() {
            return Err(Error::Config("double-pendulum noise and gravity must be valid".into()));
        }
        Ok(())
    }

    fn deriv(&self, x: &[f64; 4], u: [f64; 2]) -> [f64; 4] {
        let [l1, l2] = self.link_lengths;
        let [m1, m2] = self.link_masses;
        let g = self.gravity;
        let (t1, t2, w1, w2) = (x[0], x[1], x[2], x[3]);
        let (s12, c12) = (t1 - t2).sin_cos();
        let i1 = m1 * l1 * l1 / 12.0;
        let i2 = m2 * l2 * l2 / 12.0;
        let a = Matrix2::new(
            l1 * l1 * (0.25 * m1 + m2) + i1,
            0.5 * m2 * l1 * l2 * c12,
            0.5 * m2 * l1 * l2 * c12,
            0.25 * m2 * l2 * l2 + i2,
        );
        let rhs = Vector2::new(
            -g * l1 * t1.sin() * (0.5 * m1 + m2) - 0.5 * m2 * l1 * l2 * w2 * w2 * s12 + u[0] - u[1],
            0.5 * m2 * l2 * (l1 * w1 * w1 * s12 - g * t2.sin()) + u[1],
        );
        // the mass matrix is positive definite for positive masses
        let acc = a.try_inverse().map(|ai| ai * rhs).unwrap_or(Vector2::new(f64::NAN, f64::NAN));
        [w1, w2, acc[0], acc[1]]
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        let [l1, l2] = self.link_lengths;
        let [m1, m2] = self.link_masses;
        let (t1, t2, w1, w2) = (x[0], x[1], x[2], x[3]);
        let kin = 0.5 * (l1 * l1 * (0.25 * m1 + m2) + m1 * l1 * l1 / 12.0) * w1 * w1
            + 0.5 * (0.25 * m2 * l2 * l2 + m2 * l2 * l2 / 12.0) * w2 * w2
            + 0.5 * m2 * l1 * l2 * (t1 - t2).cos() * w1 * w2;
        let pot = -self.gravity * ((0.5 * m1 + m2) * l1 * t1.cos() + 0.5 * m2 * l2 * t2.cos());
        kin + pot
    }
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        match self {
            Environment::CartPole(p) => p.validate(),
            Environment::DoublePendulum(p) => p.validate(),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            Environment::CartPole(_) => EnvKind::CartPole,
            Environment::DoublePendulum(_) => EnvKind::DoublePendulum,
        }
    }

    pub fn state_dim(&self) -> usize {
        4
    }

    pub fn control_dim(&self) -> usize {
        match self {
            Environment::CartPole(_) => 1,
            Environment::DoublePendulum(_) => 2,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            Environment::CartPole(p) => p.dt,
            Environment::DoublePendulum(p) => p.dt,
        }
    }

    pub fn set_dt(&mut self, dt: f64) {
        match self {
            Environment::CartPole(p) => p.dt = dt,
            Environment::DoublePendulum(p) => p.dt = dt,
        }
    }

    pub fn noise_std(&self) -> f64 {
        match self {
            Environment::CartPole(p) => p.noise_std,
            Environment::DoublePendulum(p) => p.noise_std,
        }
    }

    /// Per-dimension actuation box.
    pub fn control_bounds(&self) -> Vec<(f64, f64)> {
        match self {
            Environment::CartPole(p) => vec![(p.force_range[0], p.force_range[1])],
            Environment::DoublePendulum(p) => vec![(p.torque_range[0], p.torque_range[1]); 2],
        }
    }

    /// State indices holding angles.
    pub fn angle_indices(&self) -> Vec<usize> {
        match self {
            Environment::CartPole(_) => vec![2],
            Environment::DoublePendulum(_) => vec![0, 1],
        }
    }

    /// Tip geometry used by the cost.
    pub fn tip_feature(&self) -> CostFeature {
        match self {
            Environment::CartPole(p) => CostFeature::CartPoleTip {
                length: p.pendulum_length,
            },
            Environment::DoublePendulum(p) => CostFeature::DoublePendulumTip {
                lengths: p.link_lengths,
            },
        }
    }

    /// Upright tip position.
    pub fn target_tip(&self) -> DVector<f64> {
        match self {
            Environment::CartPole(p) => DVector::from_vec(vec![0.0, p.pendulum_length]),
            Environment::DoublePendulum(p) => {
                DVector::from_vec(vec![0.0, p.link_lengths[0] + p.link_lengths[1]])
            }
        }
    }

    pub fn success_radius(&self) -> f64 {
        match self {
            Environment::CartPole(_) => 0.08,
            Environment::DoublePendulum(_) => 0.22,
        }
    }

    pub fn default_constraint(&self) -> EnvConstraint {
        match self {
            Environment::CartPole(_) => EnvConstraint::cart_wall(),
            Environment::DoublePendulum(_) => EnvConstraint::arm_range(),
        }
    }

    /// Downward rest state.
    pub fn initial_mean(&self) -> DVector<f64> {
        DVector::zeros(4)
    }

    pub fn initial_std(&self) -> f64 {
        0.01
    }

    pub fn clip(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.control_bounds())
            .map(|(v, (lo, hi))| v.clamp(lo, hi))
            .collect()
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != 4 || u.len() != self.control_dim() {
            return Err(Error::Dimension(format!(
                "state {} / control {} for a system with 4 states and {} controls",
                x.len(),
                u.len(),
                self.control_dim()
            )));
        }
        Ok(())
    }

    /// Noise-free RK4 step after clipping `u`.
    pub fn step_deterministic(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        let u = self.clip(u);
        let x0: [f64; 4] = [x[0], x[1], x[2], x[3]];
        let next = match self {
            Environment::CartPole(p) => rk4(|s| p.deriv(s, u[0]), &x0, p.dt),
            Environment::DoublePendulum(p) => rk4(|s| p.deriv(s, [u[0], u[1]]), &x0, p.dt),
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation(format!("non-finite state after step from {x:?}")));
        }
        Ok(next.to_vec())
    }

    /// One step of the noisy system.
    pub fn step<R: Rng + ?Sized>(&self, x: &[f64], u: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let mut next = self.step_deterministic(x, u)?;
        let s = self.noise_std();
        if s > 0.0 {
            for v in &mut next {
                let n: f64 = rng.sample(StandardNormal);
                *v += s * n;
            }
        }
        Ok(next)
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let m = self.initial_mean();
        let s = self.initial_std();
        m.iter()
            .map(|v| {
                let n: f64 = rng.sample(StandardNormal);
                v + s * n
            })
            .collect()
    }

    /// Distance of the (outer) tip from the upright target.
    pub fn tip_distance(&self, x: &[f64]) -> Result<f64> {
        Ok((self.tip_feature().apply(x)? - self.target_tip()).norm())
    }

    /// Whether a single state counts towards success (strictly inside the
    /// radius).
    pub fn is_success_state(&self, x: &[f64]) -> Result<bool> {
        Ok(self.tip_distance(x)? < self.success_radius())
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// The true noise-free dynamics behind the moment interface: means follow
/// the simulator and the covariance is reset to the process noise.
#[derive(Clone, Debug)]
pub struct SimulatorDynamics {
    pub env: Environment,
}

impl SimulatorDynamics {
    fn noise_cov(&self) -> DMatrix<f64> {
        let s = self.env.noise_std();
        DMatrix::identity(4, 4) * (s * s)
    }
}

impl MomentDynamics for SimulatorDynamics {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        self.env.control_dim()
    }

    fn propagate(&self, z: &GaussState, u: &DVector<f64>) -> Result<GaussState> {
        let m = self.env.step_deterministic(z.mean.as_slice(), u.as_slice())?;
        Ok(GaussState {
            mean: DVector::from_vec(m),
            cov: self.noise_cov(),
        })
    }

    fn propagate_with_jacobians(
        &self,
        z: &GaussState,
        u: &DVector<f64>,
    ) -> Result<(GaussState, DMatrix<f64>, DMatrix<f64>)> {
        let next = self.propagate(z, u)?;
        let nz = GaussState::flat_dim(4);
        let nu = u.len();
        let h = 1e-6;
        let mut jz = DMatrix::zeros(nz, nz);
        let mut ju = DMatrix::zeros(nz, nu);
        let (lo, hi): (Vec<f64>, Vec<f64>) = self.env.control_bounds().into_iter().unzip();
        for i in 0..4 + nu {
            let eval = |delta: f64| -> Result<Vec<f64>> {
                let mut x = z.mean.as_slice().to_vec();
                let mut v = u.as_slice().to_vec();
                if i < 4 {
                    x[i] += delta;
                } else {
                    // keep the probe inside the box so clipping does not flatten it
                    let k = i - 4;
                    v[k] = v[k].clamp(lo[k] + h, hi[k] - h) + delta;
                }
                self.env.step_deterministic(&x, &v)
            };
            let (p, m) = (eval(h)?, eval(-h)?);
            for r in 0..4 {
                let d = (p[r] - m[r]) / (2.0 * h);
                if i < 4 {
                    jz[(r, i)] = d;
                } else if u[i - 4] > lo[i - 4] && u[i - 4] < hi[i - 4] {
                    ju[(r, i - 4)] = d;
                }
            }
        }
        Ok((next, jz, ju))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cartpole() -> Environment {
        Environment::CartPole(CartPoleParams::default())
    }

    fn dp() -> Environment {
        Environment::DoublePendulum(DoublePendulumParams::default())
    }

    #[test]
    fn hanging_states_are_equilibria() {
        for env in [cartpole(), dp()] {
            let u = vec![0.0; env.control_dim()];
            let x = env.step_deterministic(&[0.0; 4], &u).unwrap();
            assert!(x.iter().all(|v| v.abs() <= 1e-10), "{x:?}");
        }
    }

    #[test]
    fn frictionless_cartpole_conserves_energy() {
        let p = CartPoleParams {
            friction: 0.0,
            dt: 0.01,
            ..CartPoleParams::default()
        };
        let env = Environment::CartPole(p.clone());
        let mut x = vec![0.1, 0.3, 2.0, -1.0];
        let e0 = p.energy(&x);
        for _ in 0..100 {
            x = env.step_deterministic(&x, &[0.0]).unwrap();
        }
        assert!(((p.energy(&x) - e0) / e0.abs()).abs() <= 1e-4);
    }

    #[test]
    fn double_pendulum_conserves_energy() {
        let p = DoublePendulumParams {
            dt: 0.005,
            ..DoublePendulumParams::default()
        };
        let env = Environment::DoublePendulum(p.clone());
        let mut x = vec![1.0, -0.5, 0.5, 1.0];
        let e0 = p.energy(&x);
        for _ in 0..200 {
            x = env.step_deterministic(&x, &[0.0, 0.0]).unwrap();
        }
        assert!(((p.energy(&x) - e0) / e0.abs()).abs() <= 1e-4);
    }

    fn simulate(env: &Environment, dt: f64, seconds: f64, u: &[f64]) -> Vec<f64> {
        let mut env = env.clone();
        env.set_dt(dt);
        let mut x = vec![0.0, 0.5, 2.5, 0.0];
        if let Environment::DoublePendulum(_) = env {
            x = vec![2.0, 1.0, 0.0, 0.5];
        }
        for _ in 0..(seconds / dt).round() as usize {
            x = env.step_deterministic(&x, u).unwrap();
        }
        x
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        for (env, u) in [(cartpole(), vec![1.0]), (dp(), vec![0.5, -0.3])] {
            // differences between successive halvings shrink by ~2⁴
            let x1 = simulate(&env, 0.02, 1.0, &u);
            let x2 = simulate(&env, 0.01, 1.0, &u);
            let x3 = simulate(&env, 0.005, 1.0, &u);
            let d1: f64 = x1.iter().zip(&x2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let d2: f64 = x2.iter().zip(&x3).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let ratio = d1 / d2;
            assert!(ratio > 12.0, "ratio {ratio}");
        }
    }

    #[test]
    fn controls_are_clipped() {
        let env = cartpole();
        let x = [0.1, 0.0, 0.4, 0.2];
        assert_eq!(
            env.step_deterministic(&x, &[25.0]).unwrap(),
            env.step_deterministic(&x, &[10.0]).unwrap()
        );
        let env = dp();
        assert_eq!(
            env.step_deterministic(&x, &[-7.0, 3.0]).unwrap(),
            env.step_deterministic(&x, &[-2.0, 2.0]).unwrap()
        );
    }

    #[test]
    fn noisy_steps_are_reproducible() {
        let env = cartpole();
        let a = env.step(&[0.0, 0.0, 0.3, 0.0], &[2.0], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = env.step(&[0.0, 0.0, 0.3, 0.0], &[2.0], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let c = env.step_deterministic(&[0.0, 0.0, 0.3, 0.0], &[2.0]).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x != y));
    }

    #[test]
    fn wall_verdicts() {
        let w = EnvConstraint::cart_wall();
        assert!(w.check(&[-0.69, 0.0, 0.0, 0.0]));
        assert!(!w.check(&[-0.71, 0.0, 0.0, 0.0]));
        assert!(!w.check(&[-0.70, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn angle_range_verdicts() {
        let r = EnvConstraint::arm_range();
        let EnvConstraint::AngleRange { lower, upper } = r else { unreachable!() };
        assert!(r.check(&[lower, 0.0, 0.0, 0.0]));
        assert!(r.check(&[upper, 0.0, 0.0, 0.0]));
        assert!(r.check(&[PI, 0.0, 0.0, 0.0]));
        assert!(!r.check(&[(-160.0f64).to_radians(), 0.0, 0.0, 0.0]));
        assert!(!r.check(&[200.0f64.to_radians(), 0.0, 0.0, 0.0]));
        for a in [-3.0, -2.7, 0.0, 1.0, 3.2, 3.4, 5.0] {
            for k in [-2.0, -1.0, 1.0, 3.0] {
                assert_eq!(r.check(&[a, 0.0, 0.0, 0.0]), r.check(&[a + k * TAU, 0.0, 0.0, 0.0]), "{a}");
            }
        }
    }

    #[test]
    fn initial_samples() {
        let env = cartpole();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mut sum = [0.0; 4];
        for _ in 0..n {
            for (s, v) in sum.iter_mut().zip(env.sample_initial(&mut rng)) {
                *s += v;
            }
        }
        let se = env.initial_std() / (n as f64).sqrt();
        for s in sum {
            assert!((s / n as f64).abs() <= 3.0 * se);
        }
        let a = env.sample_initial(&mut ChaCha8Rng::seed_from_u64(9));
        let b = env.sample_initial(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn success_geometry() {
        let env = cartpole();
        assert!(env.tip_distance(&[0.0, 0.0, PI, 0.0]).unwrap() < 1e-15);
        assert!(env.is_success_state(&[0.0, 0.0, PI, 0.0]).unwrap());
        assert!((env.tip_distance(&[0.0; 4]).unwrap() - 1.0).abs() < 1e-15);
        assert!(!env.is_success_state(&[0.0; 4]).unwrap());
        // tip exactly 8 cm to the side of the target
        assert!(!env.is_success_state(&[0.08, 0.0, PI, 0.0]).unwrap());
        assert!(env.is_success_state(&[0.0799, 0.0, PI, 0.0]).unwrap());
        let env = dp();
        assert!(env.tip_distance(&[PI, PI, 0.0, 0.0]).unwrap() < 1e-12);
        assert!((env.tip_distance(&[0.0; 4]).unwrap() - 4.0).abs() < 1e-12);
        // elbow bent by δ puts the tip 2 sin(δ/2) from the target
        let edge = 2.0 * (0.11f64).asin();
        assert!(env.is_success_state(&[PI, PI + 0.999 * edge, 0.0, 0.0]).unwrap());
        assert!(!env.is_success_state(&[PI, PI + 1.001 * edge, 0.0, 0.0]).unwrap());
    }

    #[test]
    fn wrapping() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn simulator_dynamics_jacobians() {
        use crate::testing::{fd_jacobian, rel_err};
        let sim = SimulatorDynamics { env: dp() };
        let z = GaussState::point(DVector::from_vec(vec![0.4, -0.2, 1.0, 0.3]));
        let u = DVector::from_vec(vec![0.5, -1.0]);
        let (_, jz, ju) = sim.propagate_with_jacobians(&z, &u).unwrap();
        let fu = fd_jacobian(|v| sim.propagate(&z, v).unwrap().to_flat(), &u, 1e-5);
        assert!(rel_err(&ju, &fu, 1e-8) < 1e-6);
        let fz = fd_jacobian(
            |v| sim.propagate(&GaussState::from_flat(v, 4), &u).unwrap().to_flat(),
            &z.to_flat(),
            1e-5,
        );
        assert!(rel_err(&jz, &fz, 1e-8) < 1e-6);
    }
}
