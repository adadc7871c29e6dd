//! Deterministic maps between Gaussian beliefs, as seen by the planner.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{psd_repair, vech_pairs};
use crate::moments::{GaussState, TransitionModel};

/// `z_{t+1} = f_MM(z_t, u_t)` with Jacobians in the flat `[μ; vech Σ]`
/// layout.
pub trait MomentDynamics: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn propagate(&self, z: &GaussState, u: &DVector<f64>) -> Result<GaussState>;
    /// Next belief with `∂z_{t+1}/∂z_t` and `∂z_{t+1}/∂u_t`.
    fn propagate_with_jacobians(
        &self,
        z: &GaussState,
        u: &DVector<f64>,
    ) -> Result<(GaussState, DMatrix<f64>, DMatrix<f64>)>;
}

impl MomentDynamics for TransitionModel {
    fn state_dim(&self) -> usize {
        TransitionModel::state_dim(self)
    }

    fn control_dim(&self) -> usize {
        TransitionModel::control_dim(self)
    }

    fn propagate(&self, z: &GaussState, u: &DVector<f64>) -> Result<GaussState> {
        TransitionModel::propagate(self, z, u)
    }

    fn propagate_with_jacobians(
        &self,
        z: &GaussState,
        u: &DVector<f64>,
    ) -> Result<(GaussState, DMatrix<f64>, DMatrix<f64>)> {
        let (next, j) = self.propagate_jacobians(z, u)?;
        Ok((next, j.state(), j.control()))
    }
}

/// `μ' = Aμ + Bu + c`, `Σ' = AΣAᵀ + N`.
#[derive(Clone, Debug)]
pub struct LinearGaussianDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise: DMatrix<f64>,
}

impl LinearGaussianDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, offset: DVector<f64>, noise: DMatrix<f64>) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || b.nrows() != d || offset.len() != d || noise.shape() != (d, d) {
            return Err(Error::Dimension("inconsistent linear dynamics".into()));
        }
        Ok(LinearGaussianDynamics { a, b, offset, noise })
    }

    /// `x_{t+1} = x_t + u_t` with no noise.
    pub fn integrator(d: usize) -> Self {
        LinearGaussianDynamics {
            a: DMatrix::identity(d, d),
            b: DMatrix::identity(d, d),
            offset: DVector::zeros(d),
            noise: DMatrix::zeros(d, d),
        }
    }

    /// Flat-layout Jacobian of `Σ ↦ AΣAᵀ`.
    fn cov_jacobian(&self) -> DMatrix<f64> {
        let d = self.a.nrows();
        let pairs = vech_pairs(d);
        let a = &self.a;
        DMatrix::from_fn(pairs.len(), pairs.len(), |r, c| {
            let (i, j) = pairs[r];
            let (k, l) = pairs[c];
            if k == l {
                a[(i, k)] * a[(j, k)]
            } else {
                a[(i, k)] * a[(j, l)] + a[(i, l)] * a[(j, k)]
            }
        })
    }
}

impl MomentDynamics for LinearGaussianDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn propagate(&self, z: &GaussState, u: &DVector<f64>) -> Result<GaussState> {
        if z.dim() != self.state_dim() || u.len() != self.control_dim() {
            return Err(Error::Dimension("state or control for linear dynamics".into()));
        }
        let mean = &self.a * &z.mean + &self.b * u + &self.offset;
        let cov = psd_repair(&(&self.a * &z.cov * self.a.transpose() + &self.noise))?;
        Ok(GaussState { mean, cov })
    }

    fn propagate_with_jacobians(
        &self,
        z: &GaussState,
        u: &DVector<f64>,
    ) -> Result<(GaussState, DMatrix<f64>, DMatrix<f64>)> {
        let next = self.propagate(z, u)?;
        let d = self.state_dim();
        let nz = GaussState::flat_dim(d);
        let mut jz = DMatrix::zeros(nz, nz);
        jz.view_mut((0, 0), (d, d)).copy_from(&self.a);
        jz.view_mut((d, d), (nz - d, nz - d)).copy_from(&self.cov_jacobian());
        let mut ju = DMatrix::zeros(nz, self.control_dim());
        ju.view_mut((0, 0), (d, self.control_dim())).copy_from(&self.b);
        Ok((next, jz, ju))
    }
}
