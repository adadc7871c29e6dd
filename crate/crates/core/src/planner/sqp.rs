//! SQP over the stacked control sequence.
//!
//! Controls are optimized in box-normalized coordinates `v ∈ [−1, 1]`,
//! `u = c + h∘v`. Each iteration solves an elastic QP
//!
//! ```text
//! min_{d,s}  gᵀd + ½dᵀBd + ρ Σ s_i + ½ε‖s‖²
//! s.t.       c(v) + A d + s ≥ 0,  s ≥ 0,  −1 ≤ v + d ≤ 1
//! ```
//!
//! with a damped-BFGS `B`, then backtracks on the ℓ1 merit
//! `J + μ Σ max(0, −c_i)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::qp::solve_qp;
use super::{Linearization, PlanProblem, PlanSolution, SolveStatus};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    pub step_tolerance: f64,
    pub feasibility_tolerance: f64,
    /// Penalty on the elastic slacks of the QP subproblem.
    pub elastic_penalty: f64,
    /// Keep only the per-time-step diagonal blocks of the BFGS matrix.
    pub block_diagonal_bfgs: bool,
    pub record_diagnostics: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iterations: 100,
            kkt_tolerance: 1e-5,
            step_tolerance: 1e-8,
            feasibility_tolerance: 1e-6,
            elastic_penalty: 1e4,
            block_diagonal_bfgs: false,
            record_diagnostics: false,
        }
    }
}

/// One accepted SQP iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub merit: f64,
    pub violation: f64,
    pub kkt: f64,
    pub step_norm: f64,
    pub step_length: f64,
    pub hamiltonians: Vec<f64>,
}

struct Scaling {
    center: Vec<f64>,
    half: Vec<f64>,
    u: usize,
}

impl Scaling {
    fn new(problem: &PlanProblem) -> Self {
        Scaling {
            center: problem.control_bounds.iter().map(|(l, h)| 0.5 * (l + h)).collect(),
            half: problem.control_bounds.iter().map(|(l, h)| 0.5 * (h - l)).collect(),
            u: problem.control_bounds.len(),
        }
    }

    fn to_controls(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let h = v.len() / self.u;
        DMatrix::from_fn(h, self.u, |t, k| self.center[k] + self.half[k] * v[t * self.u + k])
    }

    fn to_v(&self, u: &DMatrix<f64>) -> DVector<f64> {
        let h = u.nrows();
        DVector::from_fn(h * self.u, |i, _| {
            let (t, k) = (i / self.u, i % self.u);
            ((u[(t, k)] - self.center[k]) / self.half[k]).clamp(-1.0, 1.0)
        })
    }

    fn factor(&self, i: usize) -> f64 {
        self.half[i % self.u]
    }
}

/// Objective, constraints and derivatives at one iterate.
struct Point {
    v: DVector<f64>,
    lin: Linearization,
    lam: Vec<DVector<f64>>,
    cost: f64,
    grad: DVector<f64>,
    cons: DVector<f64>,
    jac: DMatrix<f64>,
}

impl Point {
    fn evaluate(problem: &PlanProblem, scaling: &Scaling, v: DVector<f64>) -> Result<Self> {
        let controls = scaling.to_controls(&v);
        let lin = Linearization::compute(problem, &controls)?;
        let lam = lin.multipliers();
        let gu = lin.gradient(&lam);
        let n = v.len();
        let grad = DVector::from_fn(n, |i, _| gu[(i / scaling.u, i % scaling.u)] * scaling.factor(i));
        let (cons, mut jac) = if problem.state_constraints.is_empty() {
            (DVector::zeros(0), DMatrix::zeros(0, n))
        } else {
            lin.constraints(&problem.state_constraints)?
        };
        for j in 0..n {
            jac.column_mut(j).scale_mut(scaling.factor(j));
        }
        Ok(Point {
            v,
            cost: lin.cost,
            lin,
            lam,
            grad,
            cons,
            jac,
        })
    }

    fn violation(&self) -> f64 {
        violation(&self.cons)
    }

    fn hamiltonians(&self) -> Vec<f64> {
        (0..self.lam.len())
            .map(|t| self.lin.stage[t].value + self.lam[t].dot(&self.lin.trajectory[t + 1].to_flat()))
            .collect()
    }
}

fn violation(c: &DVector<f64>) -> f64 {
    c.iter().map(|v| (-v).max(0.0)).sum()
}

/// Cheap objective and constraint evaluation for the line search.
fn trial(problem: &PlanProblem, scaling: &Scaling, v: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
    let controls = scaling.to_controls(v);
    let (traj, cost) = super::rollout(problem, &controls).ok()?;
    let cons = super::constraint_values(problem, &traj).ok()?;
    cost.is_finite().then_some((cost, cons))
}

fn damped_bfgs(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-300 || !sbs.is_finite() {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    if sr <= 1e-300 || !sr.is_finite() {
        return;
    }
    *b -= &bs * bs.transpose() / sbs;
    *b += &r * r.transpose() / sr;
    *b = (&*b + b.transpose()) * 0.5;
}

fn bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>, block: Option<usize>) {
    match block {
        None => damped_bfgs(b, s, y),
        Some(u) => {
            let n = s.len();
            for t in 0..n / u {
                let mut bb = b.view((t * u, t * u), (u, u)).into_owned();
                let st = s.rows(t * u, u).into_owned();
                let yt = y.rows(t * u, u).into_owned();
                damped_bfgs(&mut bb, &st, &yt);
                b.view_mut((t * u, t * u), (u, u)).copy_from(&bb);
            }
        }
    }
}

/// Stationarity of the Lagrangian projected on the box, plus
/// complementarity of the constraint multipliers.
fn kkt_residual(p: &Point, lam_c: &DVector<f64>) -> f64 {
    let r = &p.grad - p.jac.tr_mul(lam_c);
    let mut worst: f64 = 0.0;
    for i in 0..r.len() {
        let ri = if p.v[i] <= -1.0 + 1e-10 {
            r[i].min(0.0)
        } else if p.v[i] >= 1.0 - 1e-10 {
            r[i].max(0.0)
        } else {
            r[i]
        };
        worst = worst.max(ri.abs());
    }
    for i in 0..lam_c.len() {
        worst = worst.max((lam_c[i] * p.cons[i]).abs());
    }
    worst
}

fn finish(problem: &PlanProblem, scaling: &Scaling, p: Point, status: SolveStatus, iterations: usize, diagnostics: Vec<IterationRecord>) -> PlanSolution {
    let controls = problem.clip(&scaling.to_controls(&p.v));
    PlanSolution {
        controls,
        trajectory: p.lin.trajectory,
        multipliers: p.lam,
        cost: p.cost,
        status,
        iterations,
        diagnostics,
    }
}

/// Solve the planning problem by SQP from the warm start (or zero controls).
pub fn solve(problem: &PlanProblem, opts: &SolveOptions) -> Result<PlanSolution> {
    problem.validate()?;
    let scaling = Scaling::new(problem);
    let u = problem.control_dim();
    let start = match &problem.warm_start {
        Some(w) => problem.clip(w),
        None => problem.clip(&DMatrix::zeros(problem.horizon, u)),
    };
    let mut p = Point::evaluate(problem, &scaling, scaling.to_v(&start))?;
    let n = p.v.len();
    let m = p.cons.len();
    let ftol = opts.feasibility_tolerance;
    let block = opts.block_diagonal_bfgs.then_some(u);
    let initial_b = |g: &DVector<f64>| DMatrix::identity(n, n) * g.norm().max(1e-8);
    let mut b = initial_b(&p.grad);
    let mut fresh_b = true;
    let mut mu: f64 = 0.0;
    let mut diagnostics = Vec::new();
    let rho = opts.elastic_penalty;
    let eps = 1e-8;

    // QP constraint rows: [A I] ≥ −c, s ≥ 0, d ≥ −1 − v, −d ≥ v − 1
    let rows = m + m + 2 * n;
    for iter in 0..opts.max_iterations {
        let mut g = DMatrix::zeros(n + m, n + m);
        g.view_mut((0, 0), (n, n)).copy_from(&b);
        for i in 0..m {
            g[(n + i, n + i)] = eps;
        }
        let mut cq = DVector::zeros(n + m);
        cq.rows_mut(0, n).copy_from(&p.grad);
        cq.rows_mut(n, m).fill(rho);
        let mut a = DMatrix::zeros(rows, n + m);
        let mut lb = DVector::zeros(rows);
        a.view_mut((0, 0), (m, n)).copy_from(&p.jac);
        for i in 0..m {
            a[(i, n + i)] = 1.0;
            lb[i] = -p.cons[i];
            a[(m + i, n + i)] = 1.0;
        }
        for j in 0..n {
            a[(2 * m + j, j)] = 1.0;
            lb[2 * m + j] = -1.0 - p.v[j];
            a[(2 * m + n + j, j)] = -1.0;
            lb[2 * m + n + j] = p.v[j] - 1.0;
        }
        let mut x0 = DVector::zeros(n + m);
        for i in 0..m {
            x0[n + i] = (-p.cons[i]).max(0.0);
        }
        let qp = solve_qp(&g, &cq, &a, &lb, x0)?;
        let d = qp.x.rows(0, n).into_owned();
        let lam_c = qp.multipliers.rows(0, m).into_owned();
        let kkt = kkt_residual(&p, &lam_c);
        let feasible = p.violation() <= ftol;
        if kkt <= opts.kkt_tolerance && feasible {
            return Ok(finish(problem, &scaling, p, SolveStatus::Converged, iter, diagnostics));
        }
        if d.amax() <= opts.step_tolerance {
            let status = if feasible { SolveStatus::Converged } else { SolveStatus::Infeasible };
            return Ok(finish(problem, &scaling, p, status, iter, diagnostics));
        }

        mu = mu.max(1.1 * lam_c.amax().max(0.0)).max(1e-3);
        let merit0 = p.cost + mu * p.violation();
        let lin_viol = violation(&(&p.cons + &p.jac * &d));
        let dderiv = p.grad.dot(&d) + mu * (lin_viol - p.violation());
        if dderiv >= -1e-14 * (1.0 + merit0.abs()) {
            if fresh_b {
                let status = if feasible { SolveStatus::Converged } else { SolveStatus::Infeasible };
                return Ok(finish(problem, &scaling, p, status, iter, diagnostics));
            }
            b = initial_b(&p.grad);
            fresh_b = true;
            continue;
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        // Below this the Armijo decrease is lost in round-off.
        let alpha_min = (1e-13 * (1.0 + merit0.abs()) / -dderiv).max(1e-10);
        while alpha >= alpha_min {
            let vt = (&p.v + &d * alpha).map(|x| x.clamp(-1.0, 1.0));
            if let Some((cost, cons)) = trial(problem, &scaling, &vt) {
                let merit = cost + mu * violation(&cons);
                if merit <= merit0 + 1e-4 * alpha * dderiv {
                    accepted = Some(vt);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(vt) = accepted else {
            if fresh_b {
                let status = if feasible { SolveStatus::MaxIter } else { SolveStatus::Infeasible };
                log::debug!("SQP line search stalled at iteration {iter}");
                return Ok(finish(problem, &scaling, p, status, iter, diagnostics));
            }
            b = initial_b(&p.grad);
            fresh_b = true;
            continue;
        };
        let next = Point::evaluate(problem, &scaling, vt)?;
        let s = &next.v - &p.v;
        let y = (&next.grad - next.jac.tr_mul(&lam_c)) - (&p.grad - p.jac.tr_mul(&lam_c));
        bfgs_update(&mut b, &s, &y, block);
        fresh_b = false;
        if opts.record_diagnostics {
            diagnostics.push(IterationRecord {
                iteration: iter,
                cost: next.cost,
                merit: next.cost + mu * next.violation(),
                violation: next.violation(),
                kkt,
                step_norm: s.amax(),
                step_length: alpha,
                hamiltonians: next.hamiltonians(),
            });
        }
        p = next;
    }
    let status = if p.violation() <= ftol { SolveStatus::MaxIter } else { SolveStatus::Infeasible };
    Ok(finish(problem, &scaling, p, status, opts.max_iterations, diagnostics))
}

/// Write solver diagnostics as JSON lines.
pub fn write_diagnostics(path: &std::path::Path, records: &[IterationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    crate::io::write_atomic(path, out.as_bytes())
}
