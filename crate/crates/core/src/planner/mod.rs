//! Open-loop trajectory optimization over moment-matched beliefs.
//!
//! The expected cost `J = Σ_t ℓ_MM(z_t, u_t) + Φ_MM(z_H)` is differentiated
//! through the Hamiltonian `ℋ_t = ℓ_MM(z_t, u_t) + λ_{t+1}ᵀ f_MM(z_t, u_t)`:
//! the co-states satisfy `λ_H = ∂Φ_MM/∂z_H`,
//! `λ_t = ∂ℓ_MM/∂z_t + (∂f_MM/∂z_t)ᵀλ_{t+1}` and `∂J/∂u_t = ∂ℋ_t/∂u_t`.
//! The co-states are obtained with a backward sweep over stored Jacobians.

mod qp;
mod sqp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::{CostSpec, ExpectedCost};
use crate::dynamics::MomentDynamics;
use crate::error::{Error, Result};
use crate::linalg::{normal_quantile, vech_index};
use crate::moments::GaussState;

pub use qp::{solve_qp, QpResult};
pub use sqp::{solve, write_diagnostics, IterationRecord, SolveOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `x_i ≤ bound`.
    Upper,
    /// `x_i ≥ bound`.
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Constrain the predicted mean only.
    MeanOnly,
    /// Constrain the Gaussian marginal at the given confidence.
    Chance,
}

/// Per-step bound on one state coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChanceConstraint {
    pub state_index: usize,
    pub bound: f64,
    pub direction: Direction,
    pub confidence: f64,
    pub mode: ConstraintMode,
}

impl ChanceConstraint {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.state_index >= d {
            return Err(Error::Dimension(format!(
                "constraint on state {} of a {d}-dimensional state",
                self.state_index
            )));
        }
        if !(0.5..1.0).contains(&self.confidence) || !self.bound.is_finite() {
            return Err(Error::Config(format!(
                "constraint confidence must lie in [0.5, 1), got {}",
                self.confidence
            )));
        }
        Ok(())
    }

    fn quantile(&self) -> f64 {
        match self.mode {
            ConstraintMode::MeanOnly => 0.0,
            ConstraintMode::Chance => normal_quantile(self.confidence),
        }
    }

    /// Slack (feasible iff ≥ 0) and its gradient over `[μ; vech Σ]`.
    pub fn slack(&self, z: &GaussState) -> Result<(f64, DVector<f64>)> {
        let d = z.dim();
        let i = self.state_index;
        let var = z.cov[(i, i)];
        if var < 0.0 {
            return Err(Error::NotPsd(var));
        }
        let kappa = self.quantile();
        let sd = var.sqrt();
        let mut g = DVector::zeros(GaussState::flat_dim(d));
        let dsd = if kappa == 0.0 { 0.0 } else { 0.5 / sd.max(1e-9) };
        let (value, sign) = match self.direction {
            Direction::Upper => (self.bound - (z.mean[i] + kappa * sd), -1.0),
            Direction::Lower => ((z.mean[i] - kappa * sd) - self.bound, 1.0),
        };
        g[i] = sign;
        g[d + vech_index(d, i, i)] = -kappa * dsd;
        Ok((value, g))
    }
}

/// An H-step open-loop planning problem.
pub struct PlanProblem<'a> {
    pub initial: GaussState,
    pub horizon: usize,
    pub control_bounds: Vec<(f64, f64)>,
    pub state_constraints: Vec<ChanceConstraint>,
    pub cost: CostSpec,
    pub model: &'a dyn MomentDynamics,
    /// `H × U` starting controls.
    pub warm_start: Option<DMatrix<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct PlanSolution {
    /// `H × U`, row `t` is `u_t`.
    pub controls: DMatrix<f64>,
    /// `z_0, …, z_H`.
    pub trajectory: Vec<GaussState>,
    /// `λ_1, …, λ_H`.
    pub multipliers: Vec<DVector<f64>>,
    pub cost: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub diagnostics: Vec<IterationRecord>,
}

impl<'a> PlanProblem<'a> {
    pub fn validate(&self) -> Result<()> {
        let d = self.model.state_dim();
        let u = self.model.control_dim();
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.initial.dim() != d {
            return Err(Error::Dimension(format!(
                "initial state of dimension {} for a {d}-dimensional model",
                self.initial.dim()
            )));
        }
        self.initial.validate()?;
        if self.control_bounds.len() != u {
            return Err(Error::Dimension(format!(
                "{} control bounds for {u} controls",
                self.control_bounds.len()
            )));
        }
        for &(lo, hi) in &self.control_bounds {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("invalid control bounds [{lo}, {hi}]")));
            }
        }
        if self.cost.control_dim() != u {
            return Err(Error::Dimension("control penalty does not match the model".into()));
        }
        for c in &self.state_constraints {
            c.validate(d)?;
        }
        if let Some(w) = &self.warm_start {
            if w.shape() != (self.horizon, u) {
                return Err(Error::Dimension(format!(
                    "warm start of shape {:?}, expected ({}, {u})",
                    w.shape(),
                    self.horizon
                )));
            }
        }
        Ok(())
    }

    pub fn control_dim(&self) -> usize {
        self.model.control_dim()
    }

    fn check_controls(&self, controls: &DMatrix<f64>) -> Result<()> {
        if controls.shape() != (self.horizon, self.control_dim()) {
            return Err(Error::Dimension(format!(
                "controls of shape {:?}, expected ({}, {})",
                controls.shape(),
                self.horizon,
                self.control_dim()
            )));
        }
        if !controls.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("controls".into()));
        }
        Ok(())
    }

    /// Controls clipped to the box.
    pub fn clip(&self, controls: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(controls.nrows(), controls.ncols(), |t, k| {
            let (lo, hi) = self.control_bounds[k];
            controls[(t, k)].clamp(lo, hi)
        })
    }
}

fn control_row(controls: &DMatrix<f64>, t: usize) -> DVector<f64> {
    controls.row(t).transpose()
}

/// `(z_0..z_H, J)`.
pub fn rollout(problem: &PlanProblem, controls: &DMatrix<f64>) -> Result<(Vec<GaussState>, f64)> {
    problem.check_controls(controls)?;
    let mut traj = Vec::with_capacity(problem.horizon + 1);
    traj.push(problem.initial.clone());
    let mut j = 0.0;
    for t in 0..problem.horizon {
        let u = control_row(controls, t);
        j += problem.cost.stage(&traj[t], &u).map_err(|e| e.at_step(t))?.value;
        let next = problem.model.propagate(&traj[t], &u).map_err(|e| e.at_step(t))?;
        traj.push(next);
    }
    j += problem
        .cost
        .terminal(&traj[problem.horizon])
        .map_err(|e| e.at_step(problem.horizon))?
        .value;
    Ok((traj, j))
}

/// Forward pass with everything the backward sweeps need.
#[derive(Clone, Debug)]
pub(crate) struct Linearization {
    pub trajectory: Vec<GaussState>,
    pub jz: Vec<DMatrix<f64>>,
    pub ju: Vec<DMatrix<f64>>,
    pub stage: Vec<ExpectedCost>,
    pub terminal: ExpectedCost,
    pub cost: f64,
}

impl Linearization {
    fn along(problem: &PlanProblem, controls: &DMatrix<f64>, trajectory: &[GaussState]) -> Result<Self> {
        let h = problem.horizon;
        let mut jz = Vec::with_capacity(h);
        let mut ju = Vec::with_capacity(h);
        let mut stage = Vec::with_capacity(h);
        let mut cost = 0.0;
        for t in 0..h {
            let u = control_row(controls, t);
            let c = problem.cost.stage(&trajectory[t], &u).map_err(|e| e.at_step(t))?;
            cost += c.value;
            stage.push(c);
            let (_, a, b) = problem
                .model
                .propagate_with_jacobians(&trajectory[t], &u)
                .map_err(|e| e.at_step(t))?;
            jz.push(a);
            ju.push(b);
        }
        let terminal = problem.cost.terminal(&trajectory[h]).map_err(|e| e.at_step(h))?;
        cost += terminal.value;
        Ok(Linearization {
            trajectory: trajectory.to_vec(),
            jz,
            ju,
            stage,
            terminal,
            cost,
        })
    }

    pub(crate) fn compute(problem: &PlanProblem, controls: &DMatrix<f64>) -> Result<Self> {
        problem.check_controls(controls)?;
        let h = problem.horizon;
        let mut trajectory = Vec::with_capacity(h + 1);
        trajectory.push(problem.initial.clone());
        let mut jz = Vec::with_capacity(h);
        let mut ju = Vec::with_capacity(h);
        let mut stage = Vec::with_capacity(h);
        let mut cost = 0.0;
        for t in 0..h {
            let u = control_row(controls, t);
            let c = problem.cost.stage(&trajectory[t], &u).map_err(|e| e.at_step(t))?;
            cost += c.value;
            stage.push(c);
            let (next, a, b) = problem
                .model
                .propagate_with_jacobians(&trajectory[t], &u)
                .map_err(|e| e.at_step(t))?;
            trajectory.push(next);
            jz.push(a);
            ju.push(b);
        }
        let terminal = problem.cost.terminal(&trajectory[h]).map_err(|e| e.at_step(h))?;
        cost += terminal.value;
        Ok(Linearization {
            trajectory,
            jz,
            ju,
            stage,
            terminal,
            cost,
        })
    }

    /// `λ_1, …, λ_H`.
    pub(crate) fn multipliers(&self) -> Vec<DVector<f64>> {
        let h = self.jz.len();
        let mut lam = vec![DVector::zeros(0); h];
        lam[h - 1] = self.terminal.flat_state_gradient();
        for t in (1..h).rev() {
            lam[t - 1] = self.stage[t].flat_state_gradient() + self.jz[t].tr_mul(&lam[t]);
        }
        lam
    }

    /// `∂J/∂u_t = ∂ℓ_MM/∂u_t + (∂f_MM/∂u_t)ᵀλ_{t+1}` as an `H × U` matrix.
    pub(crate) fn gradient(&self, lam: &[DVector<f64>]) -> DMatrix<f64> {
        let h = self.jz.len();
        let u = self.ju[0].ncols();
        let mut g = DMatrix::zeros(h, u);
        for t in 0..h {
            let row = &self.stage[t].dcontrol + self.ju[t].tr_mul(&lam[t]);
            g.set_row(t, &row.transpose());
        }
        g
    }

    /// Slacks at `t = 1..H` for each constraint (time-major) and their
    /// Jacobian with respect to the stacked controls `[u_0; …; u_{H-1}]`.
    pub(crate) fn constraints(&self, constraints: &[ChanceConstraint]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let h = self.jz.len();
        let u = self.ju[0].ncols();
        let m = h * constraints.len();
        let mut values = DVector::zeros(m);
        let mut jac = DMatrix::zeros(m, h * u);
        for t in 1..=h {
            for (c, con) in constraints.iter().enumerate() {
                let row = (t - 1) * constraints.len() + c;
                let (v, g) = con.slack(&self.trajectory[t]).map_err(|e| e.at_step(t))?;
                values[row] = v;
                // backward sweep from z_t
                let mut mu = g;
                for s in (0..t).rev() {
                    let gu = self.ju[s].tr_mul(&mu);
                    for k in 0..u {
                        jac[(row, s * u + k)] = gu[k];
                    }
                    if s > 0 {
                        mu = self.jz[s].tr_mul(&mu);
                    }
                }
            }
        }
        Ok((values, jac))
    }
}

/// Co-states `λ_1..λ_H` along a trajectory consistent with `controls`.
pub fn adjoint_pass(
    problem: &PlanProblem,
    controls: &DMatrix<f64>,
    trajectory: &[GaussState],
) -> Result<Vec<DVector<f64>>> {
    problem.check_controls(controls)?;
    if trajectory.len() != problem.horizon + 1 {
        return Err(Error::Dimension(format!(
            "trajectory of length {} for horizon {}",
            trajectory.len(),
            problem.horizon
        )));
    }
    Ok(Linearization::along(problem, controls, trajectory)?.multipliers())
}

/// `ℋ = ℓ_MM(z, u) + λ_nextᵀ f_MM(z, u)`.
pub fn hamiltonian(lambda_next: &DVector<f64>, z: &GaussState, u: &DVector<f64>, problem: &PlanProblem) -> Result<f64> {
    let next = problem.model.propagate(z, u)?;
    let flat = next.to_flat();
    if flat.len() != lambda_next.len() {
        return Err(Error::Dimension(format!(
            "multiplier of length {} for a state of {} coordinates",
            lambda_next.len(),
            flat.len()
        )));
    }
    Ok(problem.cost.stage(z, u)?.value + lambda_next.dot(&flat))
}

/// `∂J/∂u` as an `H × U` matrix.
pub fn cost_gradient(problem: &PlanProblem, controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lin = Linearization::compute(problem, controls)?;
    let lam = lin.multipliers();
    Ok(lin.gradient(&lam))
}

/// Slacks of every constraint at `t = 1..H`, time-major.
pub fn constraint_values(problem: &PlanProblem, trajectory: &[GaussState]) -> Result<DVector<f64>> {
    let cs = &problem.state_constraints;
    let mut v = DVector::zeros(cs.len() * trajectory.len().saturating_sub(1));
    for (t, z) in trajectory.iter().enumerate().skip(1) {
        for (c, con) in cs.iter().enumerate() {
            v[(t - 1) * cs.len() + c] = con.slack(z).map_err(|e| e.at_step(t))?.0;
        }
    }
    Ok(v)
}
