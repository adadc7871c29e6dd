//! Dense convex QP by a primal active-set method:
//!
//! ```text
//! minimize ½xᵀGx + cᵀx   subject to   Ax ≥ b
//! ```
//!
//! started from a feasible point. `G` must be positive definite.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct QpResult {
    pub x: DVector<f64>,
    /// One non-negative multiplier per inequality row.
    pub multipliers: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn solve_eqp(
    g: &DMatrix<f64>,
    grad: &DVector<f64>,
    a: &DMatrix<f64>,
    working: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = g.nrows();
    let w = working.len();
    let build = |reg: f64| {
        let mut k = DMatrix::zeros(n + w, n + w);
        k.view_mut((0, 0), (n, n)).copy_from(g);
        for (r, &i) in working.iter().enumerate() {
            for j in 0..n {
                k[(j, n + r)] = -a[(i, j)];
                k[(n + r, j)] = -a[(i, j)];
            }
            k[(n + r, n + r)] = -reg;
        }
        k
    };
    let mut rhs = DVector::zeros(n + w);
    rhs.rows_mut(0, n).copy_from(&(-grad));
    for reg in [0.0, 1e-12, 1e-9] {
        if let Some(sol) = build(reg).lu().solve(&rhs) {
            if sol.iter().all(|v| v.is_finite()) {
                return Some((sol.rows(0, n).into_owned(), sol.rows(n, w).into_owned()));
            }
        }
    }
    None
}

pub fn solve_qp(
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x0: DVector<f64>,
) -> Result<QpResult> {
    let n = g.nrows();
    let m = a.nrows();
    if g.ncols() != n || c.len() != n || a.ncols() != n || b.len() != m || x0.len() != n {
        return Err(Error::Dimension("inconsistent QP data".into()));
    }
    let scale = 1.0 + x0.amax();
    if (0..m).any(|i| a.row(i).transpose().dot(&x0) < b[i] - 1e-7 * scale) {
        return Err(Error::Config("QP start point is infeasible".into()));
    }
    let mut x = x0;
    let mut working: Vec<usize> = Vec::new();
    let max_iter = 20 * (n + m) + 50;
    let mut lam = DVector::zeros(m);
    for it in 0..max_iter {
        let grad = g * &x + c;
        let (p, mult) = solve_eqp(g, &grad, a, &working)
            .ok_or_else(|| Error::NonFinite("QP working-set system".into()))?;
        if p.amax() <= 1e-12 * scale {
            let (worst, min) = mult
                .iter()
                .enumerate()
                .fold((usize::MAX, 0.0), |acc, (r, &v)| if v < acc.1 { (r, v) } else { acc });
            if worst == usize::MAX || min >= -1e-10 * (1.0 + grad.amax()) {
                lam.fill(0.0);
                for (r, &i) in working.iter().enumerate() {
                    lam[i] = mult[r].max(0.0);
                }
                return Ok(QpResult {
                    x,
                    multipliers: lam,
                    iterations: it,
                    converged: true,
                });
            }
            working.remove(worst);
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..m {
            if working.contains(&i) {
                continue;
            }
            let ai = a.row(i);
            let ap = ai.transpose().dot(&p);
            if ap < -1e-14 * p.amax() {
                let res = ai.transpose().dot(&x) - b[i];
                let step = (res.max(0.0)) / (-ap);
                if step < alpha {
                    alpha = step;
                    blocking = Some(i);
                }
            }
        }
        x += &p * alpha;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    lam.fill(0.0);
    Ok(QpResult {
        x,
        multipliers: lam,
        iterations: max_iter,
        converged: false,
    })
}
