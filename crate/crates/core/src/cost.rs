//! Expected stage and terminal costs of Gaussian state distributions.
//!
//! Costs act on a linear image `y = A φ(x) + b` of trigonometric state
//! features, e.g. the position of a pendulum tip. The moments of `y` come
//! from the exact Gaussian feature moments, so both cost families below have
//! closed-form expectations:
//!
//! ```text
//! quadratic:   E[(y − t)ᵀW(y − t)] = (m − t)ᵀW(m − t) + tr(WS)
//! saturating:  E[1 − exp(−½(y − t)ᵀW(y − t))]
//!                = 1 − |I + SW|^{-1/2} exp(−½(m − t)ᵀ W(I + SW)⁻¹ (m − t))
//! ```
//!
//! where `W = T⁻¹` is the inverse width for the saturating family. A control
//! penalty `uᵀRu` is added at every stage.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Feature, FeatureMap, JetLayout};
use crate::jet::Jet;
use crate::linalg::{symmetrize, vech_pairs, PSD_TOLERANCE};
use crate::moments::{AugmentedState, GaussState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Quadratic,
    Saturating,
}

/// Map from state to the space the cost is measured in.
///
/// Angles are measured from the downward position. Cart-pole states are
/// `[x, ẋ, θ, θ̇]`; double-pendulum states are `[θ₁, θ₂, θ̇₁, θ̇₂]` with
/// absolute link angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostFeature {
    RawState,
    /// `(x + l sin θ, −l cos θ)`.
    CartPoleTip { length: f64 },
    /// `(l₁ sin θ₁ + l₂ sin θ₂, −l₁ cos θ₁ − l₂ cos θ₂)`.
    DoublePendulumTip { lengths: [f64; 2] },
}

impl CostFeature {
    /// Feature map plus the affine map `(A, b)` onto cost space.
    fn linear_map(&self, d: usize) -> Result<(FeatureMap, DMatrix<f64>, DVector<f64>)> {
        match *self {
            CostFeature::RawState => Ok((
                FeatureMap::identity(d),
                DMatrix::identity(d, d),
                DVector::zeros(d),
            )),
            CostFeature::CartPoleTip { length } => {
                if d != 4 {
                    return Err(Error::Dimension(format!("cart-pole tip needs 4 states, got {d}")));
                }
                let f = FeatureMap::new(d, vec![Feature::Raw(0), Feature::Sin(2), Feature::Cos(2)]);
                let a = DMatrix::from_row_slice(2, 3, &[1.0, length, 0.0, 0.0, 0.0, -length]);
                Ok((f, a, DVector::zeros(2)))
            }
            CostFeature::DoublePendulumTip { lengths: [l1, l2] } => {
                if d != 4 {
                    return Err(Error::Dimension(format!(
                        "double-pendulum tip needs 4 states, got {d}"
                    )));
                }
                let f = FeatureMap::new(
                    d,
                    vec![Feature::Sin(0), Feature::Cos(0), Feature::Sin(1), Feature::Cos(1)],
                );
                let a = DMatrix::from_row_slice(2, 4, &[l1, 0.0, l2, 0.0, 0.0, -l1, 0.0, -l2]);
                Ok((f, a, DVector::zeros(2)))
            }
        }
    }

    pub fn output_dim(&self, d: usize) -> usize {
        match self {
            CostFeature::RawState => d,
            _ => 2,
        }
    }

    /// Deterministic image of a state.
    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>> {
        let (f, a, b) = self.linear_map(x.len())?;
        Ok(a * DVector::from_vec(f.apply(x)) + b)
    }
}

/// A stage cost on the feature image plus a control penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct CostSpec {
    pub kind: CostKind,
    pub target: DVector<f64>,
    /// `W` for the quadratic family, inverse width `T⁻¹` for the saturating one.
    pub weight: DMatrix<f64>,
    pub control_penalty: DMatrix<f64>,
    pub feature: CostFeature,
}

/// Expected cost and its derivatives. `dcov` is the gradient with respect
/// to a symmetric covariance, itself symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedCost {
    pub value: f64,
    pub dmean: DVector<f64>,
    pub dcov: DMatrix<f64>,
    pub dcontrol: DVector<f64>,
}

impl ExpectedCost {
    pub fn zero(d: usize, u: usize) -> Self {
        ExpectedCost {
            value: 0.0,
            dmean: DVector::zeros(d),
            dcov: DMatrix::zeros(d, d),
            dcontrol: DVector::zeros(u),
        }
    }

    /// Gradient over `[μ; vech(Σ)]`.
    pub fn flat_state_gradient(&self) -> DVector<f64> {
        let d = self.dmean.len();
        let pairs = vech_pairs(d);
        let mut g = DVector::zeros(d + pairs.len());
        g.rows_mut(0, d).copy_from(&self.dmean);
        for (c, &(i, j)) in pairs.iter().enumerate() {
            g[d + c] = if i == j {
                self.dcov[(i, i)]
            } else {
                self.dcov[(i, j)] + self.dcov[(j, i)]
            };
        }
        g
    }
}

impl CostSpec {
    pub fn quadratic(
        feature: CostFeature,
        target: DVector<f64>,
        weight: DMatrix<f64>,
        control_penalty: DMatrix<f64>,
    ) -> Result<Self> {
        let s = CostSpec {
            kind: CostKind::Quadratic,
            target,
            weight,
            control_penalty,
            feature,
        };
        s.validate()?;
        Ok(s)
    }

    /// Saturating cost with isotropic width `sigma` in cost space.
    pub fn saturating(
        feature: CostFeature,
        target: DVector<f64>,
        sigma: f64,
        control_penalty: DMatrix<f64>,
    ) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("saturating width must be positive, got {sigma}")));
        }
        let p = target.len();
        let s = CostSpec {
            kind: CostKind::Saturating,
            target,
            weight: DMatrix::identity(p, p) / (sigma * sigma),
            control_penalty,
            feature,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.target.len();
        if self.weight.nrows() != p || self.weight.ncols() != p {
            return Err(Error::Dimension(format!(
                "{}×{} weight for a {p}-dimensional target",
                self.weight.nrows(),
                self.weight.ncols()
            )));
        }
        if let CostFeature::CartPoleTip { .. } | CostFeature::DoublePendulumTip { .. } = self.feature {
            if p != 2 {
                return Err(Error::Dimension(format!("tip target must be 2-dimensional, got {p}")));
            }
        }
        let u = self.control_penalty.nrows();
        if self.control_penalty.ncols() != u {
            return Err(Error::Dimension("control penalty must be square".into()));
        }
        for (name, m) in [("weight", &self.weight), ("control penalty", &self.control_penalty)] {
            if !m.iter().all(|v| v.is_finite()) || (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                return Err(Error::Config(format!("{name} must be finite and symmetric")));
            }
            if m.nrows() > 0 {
                let min = m.clone().symmetric_eigenvalues().min();
                if min < -PSD_TOLERANCE {
                    return Err(Error::Config(format!("{name} is not positive semidefinite")));
                }
                if name == "weight" && self.kind == CostKind::Saturating && min <= 0.0 {
                    return Err(Error::Config("saturating width must be positive definite".into()));
                }
            }
        }
        if !self.target.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("cost target".into()));
        }
        Ok(())
    }

    pub fn control_dim(&self) -> usize {
        self.control_penalty.nrows()
    }

    /// Cost of a deterministic state and control.
    pub fn pointwise(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        let y = self.feature.apply(x)?;
        let r = y - &self.target;
        let q = r.dot(&(&self.weight * &r));
        let state = match self.kind {
            CostKind::Quadratic => q,
            CostKind::Saturating => 1.0 - (-0.5 * q).exp(),
        };
        Ok(state + self.control_term(u)?.0)
    }

    fn control_term(&self, u: &[f64]) -> Result<(f64, DVector<f64>)> {
        if u.len() != self.control_dim() {
            return Err(Error::Dimension(format!(
                "control of length {} for a {}×{} penalty",
                u.len(),
                self.control_dim(),
                self.control_dim()
            )));
        }
        let u = DVector::from_column_slice(u);
        let ru = &self.control_penalty * &u;
        Ok((u.dot(&ru), ru * 2.0))
    }

    /// Moments of the cost-space image with gradients over `[μ; vec(Σ)]`.
    fn image_jets(&self, z: &GaussState) -> Result<(Vec<Jet>, Vec<Vec<Jet>>)> {
        let d = z.dim();
        let (f, a, b) = self.feature.linear_map(d)?;
        if a.nrows() != self.target.len() {
            return Err(Error::Dimension(format!(
                "feature image of dimension {} for a {}-dimensional target",
                a.nrows(),
                self.target.len()
            )));
        }
        let n = d + d * d;
        let fj = f.moment_jets(
            &z.mean,
            &z.cov,
            JetLayout {
                nvars: n,
                mean_offset: Some(0),
                cov_offset: Some(d),
            },
        );
        let p = a.nrows();
        let nf = f.dim();
        let mean: Vec<Jet> = (0..p)
            .map(|r| {
                let mut j = Jet::constant(b[r], n);
                for k in 0..nf {
                    if a[(r, k)] != 0.0 {
                        j.axpy(a[(r, k)], &fj.mean[k]);
                    }
                }
                j
            })
            .collect();
        // A S
        let as_: Vec<Vec<Jet>> = (0..p)
            .map(|r| {
                (0..nf)
                    .map(|l| {
                        let mut j = Jet::constant(0.0, n);
                        for k in 0..nf {
                            if a[(r, k)] != 0.0 {
                                j.axpy(a[(r, k)], &fj.cov[k][l]);
                            }
                        }
                        j
                    })
                    .collect()
            })
            .collect();
        let cov: Vec<Vec<Jet>> = (0..p)
            .map(|r| {
                (0..p)
                    .map(|c| {
                        let mut j = Jet::constant(0.0, n);
                        for l in 0..nf {
                            if a[(c, l)] != 0.0 {
                                j.axpy(a[(c, l)], &as_[r][l]);
                            }
                        }
                        j
                    })
                    .collect()
            })
            .collect();
        Ok((mean, cov))
    }

    /// Expected state cost given image moments; returns value and the
    /// gradients with respect to the image mean and covariance.
    fn image_cost(&self, m: &DVector<f64>, s: &DMatrix<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let w = &self.weight;
        let r = m - &self.target;
        match self.kind {
            CostKind::Quadratic => {
                let wr = w * &r;
                let value = r.dot(&wr) + (w * s).trace();
                Ok((value, wr * 2.0, w.clone()))
            }
            CostKind::Saturating => {
                let p = m.len();
                let iw = DMatrix::identity(p, p) + s * w;
                let lu = iw.clone().lu();
                let det = lu.determinant();
                if !(det > 0.0) || !det.is_finite() {
                    return Err(Error::NonFinite("saturating cost normalizer".into()));
                }
                let inv = lu
                    .try_inverse()
                    .ok_or_else(|| Error::NonFinite("saturating cost inverse".into()))?;
                let k = symmetrize(&(w * inv));
                let kr = &k * &r;
                let e = det.powf(-0.5) * (-0.5 * r.dot(&kr)).exp();
                let ds = (&kr * kr.transpose() - &k) * (-0.5 * e);
                Ok((1.0 - e, kr * e, ds))
            }
        }
    }

    fn state_part(&self, z: &GaussState) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let d = z.dim();
        let (mj, sj) = self.image_jets(z)?;
        let p = mj.len();
        let m = DVector::from_iterator(p, mj.iter().map(|j| j.v));
        let s = DMatrix::from_fn(p, p, |i, k| sj[i][k].v);
        let (value, dm, ds) = self.image_cost(&m, &s)?;
        let mut g = DVector::zeros(d + d * d);
        for i in 0..p {
            g.axpy(dm[i], &mj[i].g, 1.0);
            for k in 0..p {
                g.axpy(ds[(i, k)], &sj[i][k].g, 1.0);
            }
        }
        let dmean = g.rows(0, d).into_owned();
        let dcov = DMatrix::from_fn(d, d, |i, k| g[d + i * d + k]);
        if !value.is_finite() || !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("expected cost".into()));
        }
        Ok((value, dmean, symmetrize(&dcov)))
    }

    /// `ℓ_MM(z, u)`.
    pub fn stage(&self, z: &GaussState, u: &DVector<f64>) -> Result<ExpectedCost> {
        let (value, dmean, dcov) = self.state_part(z)?;
        let (cu, du) = self.control_term(u.as_slice())?;
        Ok(ExpectedCost {
            value: value + cu,
            dmean,
            dcov,
            dcontrol: du,
        })
    }

    /// `Φ_MM(z)`: the state part of the stage cost.
    pub fn terminal(&self, z: &GaussState) -> Result<ExpectedCost> {
        let (value, dmean, dcov) = self.state_part(z)?;
        Ok(ExpectedCost {
            value,
            dmean,
            dcov,
            dcontrol: DVector::zeros(self.control_dim()),
        })
    }

    /// Mean and covariance of the cost-space image of `z`.
    pub fn image_moments(&self, z: &GaussState) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (mj, sj) = self.image_jets(z)?;
        let p = mj.len();
        Ok((
            DVector::from_iterator(p, mj.iter().map(|j| j.v)),
            DMatrix::from_fn(p, p, |i, k| sj[i][k].v),
        ))
    }
}

/// Gaussian approximation of the tip position.
pub fn tip_moments(z: &GaussState, geometry: &CostFeature) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (f, a, b) = geometry.linear_map(z.dim())?;
    let fm = f.moments(&z.mean, &z.cov);
    Ok((&a * fm.mean + b, &a * fm.cov * a.transpose()))
}

fn split(zt: &AugmentedState) -> (GaussState, DVector<f64>) {
    let d = zt.state_dim;
    let z = GaussState {
        mean: zt.mean.rows(0, d).into_owned(),
        cov: zt.state_block(),
    };
    let u = zt.mean.rows(d, zt.dim() - d).into_owned();
    (z, u)
}

pub fn expected_quadratic(zt: &AugmentedState, spec: &CostSpec) -> Result<ExpectedCost> {
    if spec.kind != CostKind::Quadratic {
        return Err(Error::Config("expected a quadratic cost".into()));
    }
    let (z, u) = split(zt);
    spec.stage(&z, &u)
}

pub fn expected_saturating(zt: &AugmentedState, spec: &CostSpec) -> Result<ExpectedCost> {
    if spec.kind != CostKind::Saturating {
        return Err(Error::Config("expected a saturating cost".into()));
    }
    let (z, u) = split(zt);
    spec.stage(&z, &u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::augment_control;
    use crate::testing::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mc_cost(spec: &CostSpec, z: &GaussState, u: &DVector<f64>, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let vals = mc_cost_samples(spec, z, u, n, rng).unwrap();
        let m = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        (m, (var / n as f64).sqrt())
    }

    fn random_spec(rng: &mut ChaCha8Rng, kind: CostKind, feature: CostFeature, d: usize) -> CostSpec {
        let p = feature.output_dim(d);
        let target = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let r = random_spd(rng, 1, 0.1, 1e-3);
        match kind {
            CostKind::Quadratic => CostSpec::quadratic(feature, target, random_spd(rng, p, 0.7, 0.1), r).unwrap(),
            CostKind::Saturating => CostSpec::saturating(feature, target, rng.random_range(0.3..1.0), r).unwrap(),
        }
    }

    fn features() -> Vec<CostFeature> {
        vec![
            CostFeature::RawState,
            CostFeature::CartPoleTip { length: 0.5 },
            CostFeature::DoublePendulumTip { lengths: [1.0, 1.0] },
        ]
    }

    #[test]
    fn deterministic_tip_kinematics() {
        let z = GaussState::point(DVector::from_vec(vec![0.3, 0.0, 0.4, 0.0]));
        let (m, s) = tip_moments(&z, &CostFeature::CartPoleTip { length: 0.5 }).unwrap();
        assert!((m[0] - (0.3 + 0.5 * 0.4f64.sin())).abs() < 1e-15);
        assert!((m[1] + 0.5 * 0.4f64.cos()).abs() < 1e-15);
        assert!(s.amax() < 1e-15);
        let z = GaussState::point(DVector::from_vec(vec![0.4, -1.2, 0.0, 0.0]));
        let (m, _) = tip_moments(&z, &CostFeature::DoublePendulumTip { lengths: [1.0, 0.7] }).unwrap();
        assert!((m[0] - (0.4f64.sin() + 0.7 * (-1.2f64).sin())).abs() < 1e-15);
        assert!((m[1] + (0.4f64.cos() + 0.7 * (-1.2f64).cos())).abs() < 1e-15);
    }

    #[test]
    fn gaussian_angle_tip_moments() {
        let sigma2: f64 = 0.3;
        let mut cov = DMatrix::zeros(4, 4);
        cov[(2, 2)] = sigma2;
        let z = GaussState {
            mean: DVector::zeros(4),
            cov,
        };
        let (m, _) = tip_moments(&z, &CostFeature::CartPoleTip { length: 1.0 }).unwrap();
        assert!(m[0].abs() < 1e-15);
        assert!((m[1] + (-sigma2 / 2.0).exp()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let c: Vec<f64> = (0..n).map(|_| (sigma2.sqrt() * standard_normal(&mut rng)).cos()).collect();
        let mean = c.iter().sum::<f64>() / n as f64;
        let se = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 * (n - 1) as f64)).sqrt();
        assert!((mean - (-sigma2 / 2.0).exp()).abs() < 4.0 * se);
    }

    #[test]
    fn upright_cart_pole_has_zero_tip_distance() {
        let spec = CostSpec::saturating(
            CostFeature::CartPoleTip { length: 0.5 },
            DVector::from_vec(vec![0.0, 0.5]),
            0.25,
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let z = GaussState::point(DVector::from_vec(vec![0.0, 0.0, std::f64::consts::PI, 0.0]));
        let (m, _) = spec.image_moments(&z).unwrap();
        assert!((m - &spec.target).norm() < 1e-15);
        assert!(spec.terminal(&z).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn quadratic_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = random_spec(&mut rng, CostKind::Quadratic, CostFeature::CartPoleTip { length: 0.5 }, 4);
        let x = DVector::from_vec(vec![0.1, 0.2, 2.0, -0.4]);
        let u = DVector::from_vec(vec![0.7]);
        let c = spec.stage(&GaussState::point(x.clone()), &u).unwrap();
        assert!((c.value - spec.pointwise(x.as_slice(), u.as_slice()).unwrap()).abs() < 1e-14);

        let spec = CostSpec::quadratic(
            CostFeature::RawState,
            DVector::from_vec(vec![0.5, -0.5]),
            DMatrix::identity(2, 2),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let s = random_spd(&mut rng, 2, 0.5, 0.0);
        let z = GaussState {
            mean: spec.target.clone(),
            cov: s.clone(),
        };
        let c = spec.stage(&z, &DVector::zeros(1)).unwrap();
        assert!((c.value - s.trace()).abs() < 1e-14);
    }

    #[test]
    fn saturating_collapses() {
        let spec = CostSpec::saturating(
            CostFeature::RawState,
            DVector::from_vec(vec![0.2, 0.1]),
            0.5,
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let z = GaussState::point(spec.target.clone());
        assert_eq!(spec.terminal(&z).unwrap().value, 0.0);
        let x = DVector::from_vec(vec![0.6, -0.2]);
        let r = &x - &spec.target;
        let expect = 1.0 - (-0.5 * r.norm_squared() / 0.25).exp();
        let got = spec.terminal(&GaussState::point(x)).unwrap().value;
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn expected_costs_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [CostKind::Quadratic, CostKind::Saturating] {
            for f in features() {
                let spec = random_spec(&mut rng, kind, f, 4);
                let z = random_gauss_state(&mut rng, 4, 0.4);
                let u = DVector::from_vec(vec![0.3]);
                let c = spec.stage(&z, &u).unwrap();
                let (m, se) = mc_cost(&spec, &z, &u, 200_000, &mut rng);
                assert!((c.value - m).abs() <= 4.0 * se, "{kind:?}: {} vs {m} (se {se})", c.value);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            for kind in [CostKind::Quadratic, CostKind::Saturating] {
                for f in features() {
                    let spec = random_spec(&mut rng, kind, f, 4);
                    let z = random_gauss_state(&mut rng, 4, 0.4);
                    let u = DVector::from_vec(vec![rng.random_range(-1.0..1.0)]);
                    let c = spec.stage(&z, &u).unwrap();
                    let nz = GaussState::flat_dim(4);
                    let mut x = DVector::zeros(nz + 1);
                    x.rows_mut(0, nz).copy_from(&z.to_flat());
                    x[nz] = u[0];
                    let fd = fd_jacobian(
                        |v| {
                            let zz = GaussState::from_flat(&v.rows(0, nz).into_owned(), 4);
                            let uu = v.rows(nz, 1).into_owned();
                            DVector::from_element(1, spec.stage(&zz, &uu).unwrap().value)
                        },
                        &x,
                        1e-5,
                    );
                    let mut an = DMatrix::zeros(1, nz + 1);
                    an.view_mut((0, 0), (1, nz)).copy_from(&c.flat_state_gradient().transpose());
                    an[(0, nz)] = c.dcontrol[0];
                    let e = rel_err(&an, &fd, 1e-8);
                    assert!(e <= 1e-6, "{kind:?} {spec:?}: {e}\n{an}\n{fd}");
                }
            }
        }
    }

    #[test]
    fn saturating_is_monotone_in_distance() {
        let spec = CostSpec::saturating(
            CostFeature::RawState,
            DVector::zeros(2),
            0.25,
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let cov = DMatrix::from_row_slice(2, 2, &[0.02, 0.005, 0.005, 0.01]);
        for dir in [0.0, 0.7, 1.9, 3.5] {
            let mut prev = -1.0;
            for k in 0..40 {
                let r = 0.05 * k as f64;
                let z = GaussState {
                    mean: DVector::from_vec(vec![r * f64::cos(dir), r * f64::sin(dir)]),
                    cov: cov.clone(),
                };
                let v = spec.terminal(&z).unwrap().value;
                assert!(v >= prev && (0.0..=1.0).contains(&v));
                prev = v;
            }
        }
    }

    #[test]
    fn costs_are_invariant_to_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let perm = [2usize, 0, 1];
        let pm = DMatrix::from_fn(3, 3, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
        for kind in [CostKind::Quadratic, CostKind::Saturating] {
            let spec = random_spec(&mut rng, kind, CostFeature::RawState, 3);
            let z = random_gauss_state(&mut rng, 3, 0.5);
            let u = DVector::from_vec(vec![0.2]);
            let permuted = CostSpec {
                target: &pm * &spec.target,
                weight: &pm * &spec.weight * pm.transpose(),
                ..spec.clone()
            };
            let zp = GaussState {
                mean: &pm * &z.mean,
                cov: &pm * &z.cov * pm.transpose(),
            };
            let a = spec.stage(&z, &u).unwrap().value;
            let b = permuted.stage(&zp, &u).unwrap().value;
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn augmented_entry_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = random_spec(&mut rng, CostKind::Quadratic, CostFeature::RawState, 2);
        let z = random_gauss_state(&mut rng, 2, 0.3);
        let u = DVector::from_vec(vec![0.4]);
        let zt = augment_control(&z, &u);
        assert_eq!(expected_quadratic(&zt, &spec).unwrap(), spec.stage(&z, &u).unwrap());
        assert!(expected_saturating(&zt, &spec).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(CostSpec::saturating(CostFeature::RawState, DVector::zeros(2), 0.0, DMatrix::zeros(1, 1)).is_err());
        assert!(CostSpec::quadratic(
            CostFeature::RawState,
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            DMatrix::zeros(1, 1)
        )
        .is_err());
        assert!(CostSpec::quadratic(
            CostFeature::CartPoleTip { length: 0.5 },
            DVector::zeros(3),
            DMatrix::identity(3, 3),
            DMatrix::zeros(1, 1)
        )
        .is_err());
    }
}
