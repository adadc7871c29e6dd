//! Moment-matching propagation of a Gaussian state through the GP dynamics.
//!
//! For an input `x̃ ~ N(μ̃, Σ̃)` the predictive distribution of the GP output
//! is replaced by a Gaussian with its exact mean and covariance. With
//! `ν_i = x̃_i − μ̃`, `Λ_a = diag(ℓ_a²)` and `β_a = (K_a + σ_a² I)⁻¹ y_a`:
//!
//! ```text
//! q_ai  = σ_fa² |Σ̃Λ_a⁻¹ + I|^{-1/2} exp(-½ ν_iᵀ(Σ̃ + Λ_a)⁻¹ν_i)
//! μ_Δa  = β_aᵀ q_a
//! Q_ij  = k_a(x̃_i, μ̃) k_b(x̃_j, μ̃) |R|^{-1/2} exp(½ z_ijᵀ R⁻¹Σ̃ z_ij)
//!         R = Σ̃(Λ_a⁻¹ + Λ_b⁻¹) + I,  z_ij = Λ_a⁻¹ν_i + Λ_b⁻¹ν_j
//! Σ_Δab = β_aᵀQβ_b − μ_Δa μ_Δb + δ_ab (σ_fa² − tr((K_a + σ_a² I)⁻¹Q) + σ_a²)
//! ```
//!
//! `R⁻¹Σ̃` replaces the `(Λ_a⁻¹ + Λ_b⁻¹ + Σ̃⁻¹)⁻¹` form so that singular input
//! covariances (the deterministic control block) need no special casing.
//!
//! The input-output cross-covariance uses
//! `cov(x̃, Δ_a) = Σ̃ V_a` with `V_a = Σ_i β_ai q_ai (Σ̃ + Λ_a)⁻¹ν_i`, and the
//! state block is obtained as `cov(x, x̃) V_a`.
//!
//! Jacobians of every stage are derived in closed form and chained; the
//! state covariance enters and leaves in the row-major upper-triangular
//! layout used by [`GaussState::to_flat`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, JetLayout};
use crate::gp::GpModel;
use crate::linalg::{chol_inverse, psd_repair, symmetrize, vech, vech_len, vech_pairs, PSD_TOLERANCE};

/// Gaussian belief over the state: `z = [μ, Σ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let z = GaussState { mean, cov };
        z.validate()?;
        Ok(z)
    }

    /// Zero-covariance belief at `mean`.
    pub fn point(mean: DVector<f64>) -> Self {
        let d = mean.len();
        GaussState {
            mean,
            cov: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if self.cov.nrows() != d || self.cov.ncols() != d {
            return Err(Error::Dimension(format!(
                "mean of length {d} with {}×{} covariance",
                self.cov.nrows(),
                self.cov.ncols()
            )));
        }
        if !self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Gaussian state".into()));
        }
        let scale = self.cov.diagonal().amax().max(1.0);
        if (&self.cov - self.cov.transpose()).amax() > 1e-9 * scale {
            return Err(Error::Dimension("covariance is not symmetric".into()));
        }
        if d > 0 {
            let min = symmetrize(&self.cov).symmetric_eigenvalues().min();
            if min < -PSD_TOLERANCE * scale {
                return Err(Error::NotPsd(min));
            }
        }
        Ok(())
    }

    /// Number of flat coordinates `D + D(D+1)/2`.
    pub fn flat_dim(d: usize) -> usize {
        d + vech_len(d)
    }

    /// `[μ; vech(Σ)]` with the row-major upper triangle of `Σ`.
    pub fn to_flat(&self) -> DVector<f64> {
        let d = self.dim();
        let mut v = DVector::zeros(Self::flat_dim(d));
        v.rows_mut(0, d).copy_from(&self.mean);
        v.rows_mut(d, vech_len(d)).copy_from(&vech(&self.cov));
        v
    }

    pub fn from_flat(v: &DVector<f64>, d: usize) -> Self {
        let mean = v.rows(0, d).into_owned();
        let cov = crate::linalg::unvech(&v.as_slice()[d..], d);
        GaussState { mean, cov }
    }
}

/// Control-augmented input distribution `[μ̃, Σ̃]` with a deterministic
/// control block.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Number of leading (state or feature) coordinates.
    pub state_dim: usize,
}

impl AugmentedState {
    pub fn state_block(&self) -> DMatrix<f64> {
        self.cov
            .view((0, 0), (self.state_dim, self.state_dim))
            .into_owned()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `μ̃ = [μ, u]`, `Σ̃ = blkdiag(Σ, 0)`.
pub fn augment_control(z: &GaussState, u: &DVector<f64>) -> AugmentedState {
    let d = z.dim();
    let e = d + u.len();
    let mut mean = DVector::zeros(e);
    mean.rows_mut(0, d).copy_from(&z.mean);
    mean.rows_mut(d, u.len()).copy_from(u);
    let mut cov = DMatrix::zeros(e, e);
    cov.view_mut((0, 0), (d, d)).copy_from(&z.cov);
    AugmentedState {
        mean,
        cov,
        state_dim: d,
    }
}

fn check_aug(model: &GpModel, zt: &AugmentedState) -> Result<()> {
    if zt.dim() != model.input_dim() || zt.cov.nrows() != zt.dim() || zt.cov.ncols() != zt.dim() {
        return Err(Error::Dimension(format!(
            "augmented state of dimension {} for GP input dimension {}",
            zt.dim(),
            model.input_dim()
        )));
    }
    Ok(())
}

fn differences(model: &GpModel, mean: &DVector<f64>) -> DMatrix<f64> {
    let x = model.dataset().inputs();
    let mut nu = x.clone();
    for mut row in nu.row_iter_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v -= mean[k];
        }
    }
    nu
}

/// `q_a` evaluated literally from its closed form.
pub fn compute_q(model: &GpModel, zt: &AugmentedState, dim: usize) -> Result<DVector<f64>> {
    check_aug(model, zt)?;
    let h = &model.hypers()[dim];
    let e = zt.dim();
    let lam = DMatrix::from_diagonal(&DVector::from_iterator(
        e,
        h.length_scales.iter().map(|l| l * l),
    ));
    let lam_inv = DMatrix::from_diagonal(&h.inverse_lambda());
    let det = (&zt.cov * &lam_inv + DMatrix::identity(e, e)).determinant();
    let b = (&zt.cov + &lam)
        .try_inverse()
        .ok_or_else(|| Error::NonFinite("(Σ̃ + Λ) inverse".into()))?;
    let nu = differences(model, &zt.mean);
    let c = h.signal_variance / det.sqrt();
    Ok(DVector::from_iterator(
        nu.nrows(),
        nu.row_iter().map(|r| {
            let v = r.transpose();
            c * (-0.5 * v.dot(&(&b * &v))).exp()
        }),
    ))
}

/// `Q` for output pair `(a, b)` evaluated literally from its closed form.
pub fn compute_big_q(model: &GpModel, zt: &AugmentedState, a: usize, b: usize) -> Result<DMatrix<f64>> {
    check_aug(model, zt)?;
    let ha = &model.hypers()[a];
    let hb = &model.hypers()[b];
    let e = zt.dim();
    let ia = DMatrix::from_diagonal(&ha.inverse_lambda());
    let ib = DMatrix::from_diagonal(&hb.inverse_lambda());
    let r = &zt.cov * (&ia + &ib) + DMatrix::identity(e, e);
    let rinv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NonFinite("R inverse".into()))?;
    let m = &rinv * &zt.cov;
    let det = r.determinant();
    let x = model.dataset().inputs();
    let n = x.nrows();
    let nu = differences(model, &zt.mean);
    let ka: Vec<f64> = (0..n)
        .map(|i| ha.eval(x.row(i).transpose().as_slice(), zt.mean.as_slice()))
        .collect();
    let kb: Vec<f64> = (0..n)
        .map(|i| hb.eval(x.row(i).transpose().as_slice(), zt.mean.as_slice()))
        .collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let z = &ia * nu.row(i).transpose() + &ib * nu.row(j).transpose();
        ka[i] * kb[j] / det.sqrt() * (0.5 * z.dot(&(&m * &z))).exp()
    }))
}

/// Intermediate quantities of one propagation step.
#[derive(Clone, Debug)]
pub struct PropagationWork {
    /// `q_a` per output dimension.
    pub q: Vec<DVector<f64>>,
    /// `Q` per output pair, indexed `[a][b]`.
    pub big_q: Vec<Vec<DMatrix<f64>>>,
    /// `ν_i = x̃_i − μ̃` as rows.
    pub nu: DMatrix<f64>,
}

impl PropagationWork {
    pub fn compute(model: &GpModel, zt: &AugmentedState) -> Result<Self> {
        let dd = model.output_dim();
        let q = (0..dd)
            .map(|a| compute_q(model, zt, a))
            .collect::<Result<Vec<_>>>()?;
        let big_q = (0..dd)
            .map(|a| {
                (0..dd)
                    .map(|b| compute_big_q(model, zt, a, b))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PropagationWork {
            q,
            big_q,
            nu: differences(model, &zt.mean),
        })
    }
}

/// Whether predictive covariances are carried through time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    /// Full moment matching.
    #[default]
    Full,
    /// The input covariance is treated as zero and the output covariance is
    /// the process-noise diagonal alone.
    ZeroVariance,
}

/// Jacobian blocks of `(μ_t, Σ_t, u_t) ↦ (μ_{t+1}, Σ_{t+1})`, covariance
/// coordinates in the flat upper-triangular layout.
#[derive(Clone, Debug)]
pub struct PropagationJacobians {
    pub dmean_dmean: DMatrix<f64>,
    pub dmean_dcov: DMatrix<f64>,
    pub dcov_dmean: DMatrix<f64>,
    pub dcov_dcov: DMatrix<f64>,
    pub dmean_du: DMatrix<f64>,
    pub dcov_du: DMatrix<f64>,
}

impl PropagationJacobians {
    /// `∂z_{t+1}/∂z_t` in flat coordinates.
    pub fn state(&self) -> DMatrix<f64> {
        let d = self.dmean_dmean.nrows();
        let nz = GaussState::flat_dim(d);
        let mut j = DMatrix::zeros(nz, nz);
        j.view_mut((0, 0), (d, d)).copy_from(&self.dmean_dmean);
        j.view_mut((0, d), (d, nz - d)).copy_from(&self.dmean_dcov);
        j.view_mut((d, 0), (nz - d, d)).copy_from(&self.dcov_dmean);
        j.view_mut((d, d), (nz - d, nz - d)).copy_from(&self.dcov_dcov);
        j
    }

    /// `∂z_{t+1}/∂u_t` in flat coordinates.
    pub fn control(&self) -> DMatrix<f64> {
        let d = self.dmean_dmean.nrows();
        let u = self.dmean_du.ncols();
        let nz = GaussState::flat_dim(d);
        let mut j = DMatrix::zeros(nz, u);
        j.view_mut((0, 0), (d, u)).copy_from(&self.dmean_du);
        j.view_mut((d, 0), (nz - d, u)).copy_from(&self.dcov_du);
        j
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.dmean_dmean,
            &self.dmean_dcov,
            &self.dcov_dmean,
            &self.dcov_dcov,
            &self.dmean_du,
            &self.dcov_du,
        ]
        .iter()
        .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Moments of the GP output for a Gaussian input, with optional Jacobians
/// with respect to `[μ̃; vec(Σ̃)]` (row-major `Σ̃`).
struct Core {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Column `a` is `V_a`.
    v: DMatrix<f64>,
    jac: Option<CoreJac>,
}

struct CoreJac {
    mean: DMatrix<f64>,
    /// Row `a * D + b`.
    cov: DMatrix<f64>,
    /// Row `a * E + k`.
    v: DMatrix<f64>,
}

fn put_sym(row: &mut [f64], offset: usize, g: &DMatrix<f64>) {
    let e = g.nrows();
    for p in 0..e {
        for r in 0..e {
            row[offset + p * e + r] += 0.5 * (g[(p, r)] + g[(r, p)]);
        }
    }
}

fn core_moments(
    gp: &GpModel,
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    want_cov: bool,
    want_jac: bool,
) -> Result<Core> {
    let n = gp.len();
    let e = gp.input_dim();
    let dd = gp.output_dim();
    let nb = e + e * e;
    let nu = differences(gp, m);
    let zero_cov = s.iter().all(|v| *v == 0.0);

    let mut mean = DVector::zeros(dd);
    let mut vmat = DMatrix::zeros(e, dd);
    let mut qs: Vec<DVector<f64>> = Vec::with_capacity(dd);
    let mut jmean = DMatrix::zeros(if want_jac { dd } else { 0 }, nb);
    let mut jv = DMatrix::zeros(if want_jac { dd * e } else { 0 }, nb);

    for a in 0..dd {
        let h = &gp.hypers()[a];
        let beta = gp.beta(a);
        let mut bmat = s.clone();
        for (k, l) in h.length_scales.iter().enumerate() {
            bmat[(k, k)] += l * l;
        }
        let chol = bmat
            .cholesky()
            .ok_or_else(|| Error::NonFinite("Σ̃ + Λ is not positive definite".into()))?;
        let lower = chol.unpack();
        let logdet_b: f64 = 2.0 * lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let binv = chol_inverse(&lower);
        let log_lam: f64 = h.length_scales.iter().map(|l| 2.0 * l.ln()).sum();
        let lnc = h.signal_variance.ln() + 0.5 * log_lam - 0.5 * logdet_b;
        let t = &nu * &binv;
        let q = DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let quad = nu.row(i).dot(&t.row(i));
                (lnc - 0.5 * quad).exp()
            }),
        );
        let w = beta.component_mul(&q);
        mean[a] = w.sum();
        let va = t.tr_mul(&w);
        vmat.set_column(a, &va);

        if want_jac {
            let mut tw = t.clone();
            for (i, mut row) in tw.row_iter_mut().enumerate() {
                row *= w[i];
            }
            let g = t.tr_mul(&tw);
            {
                let mut row = vec![0.0; nb];
                row[..e].copy_from_slice(va.as_slice());
                let dm_ds = (&g - &binv * mean[a]) * 0.5;
                put_sym(&mut row, e, &dm_ds);
                for (c, v) in row.into_iter().enumerate() {
                    jmean[(a, c)] = v;
                }
            }
            let dv_dm = &g - &binv * w.sum();
            // Σ_i w_i t_ik t_ip t_ir
            let mut third = vec![0.0; e * e * e];
            for i in 0..n {
                let ti = t.row(i);
                let wi = w[i];
                if wi == 0.0 {
                    continue;
                }
                for k in 0..e {
                    let a1 = wi * ti[k];
                    for p in 0..e {
                        let a2 = a1 * ti[p];
                        let base = (k * e + p) * e;
                        for r in 0..e {
                            third[base + r] += a2 * ti[r];
                        }
                    }
                }
            }
            for k in 0..e {
                let row_idx = a * e + k;
                for l in 0..e {
                    jv[(row_idx, l)] = dv_dm[(k, l)];
                }
                for p in 0..e {
                    for r in 0..e {
                        let val = -0.5 * (binv[(k, p)] * va[r] + binv[(k, r)] * va[p])
                            + 0.5 * third[(k * e + p) * e + r]
                            - 0.5 * va[k] * binv[(p, r)];
                        jv[(row_idx, e + p * e + r)] = val;
                    }
                }
            }
        }
        qs.push(q);
    }

    let mut cov = DMatrix::zeros(dd, dd);
    let mut jcov = DMatrix::zeros(if want_jac { dd * dd } else { 0 }, nb);
    if want_cov {
        let mut omega = DMatrix::<f64>::zeros(n, n);
        for a in 0..dd {
            let ha = &gp.hypers()[a];
            let ia = ha.inverse_lambda();
            let ba = gp.beta(a);
            for b in a..dd {
                let hb = &gp.hypers()[b];
                let ib = hb.inverse_lambda();
                let bb = gp.beta(b);
                let p = &ia + &ib;
                let sp = p.map(|v| v.sqrt());

                let ik = (a == b).then(|| gp.inv_k(a));
                // Ω = W ∘ Q with W = β_a β_bᵀ (minus (K_a + σ²I)⁻¹ when a = b)
                let weight = |i: usize, j: usize| match ik {
                    Some(ik) => ba[i] * ba[j] - ik[(i, j)],
                    None => ba[i] * bb[j],
                };
                let cinv = if zero_cov {
                    for j in 0..n {
                        for i in 0..n {
                            omega[(i, j)] = qs[a][i] * qs[b][j] * weight(i, j);
                        }
                    }
                    DMatrix::identity(e, e)
                } else {
                    let amat = DMatrix::from_fn(e, e, |i, j| sp[i] * s[(i, j)] * sp[j]);
                    let cmat = &amat + DMatrix::identity(e, e);
                    let lower = cmat
                        .cholesky()
                        .ok_or_else(|| Error::NonFinite("R is singular".into()))?
                        .unpack();
                    let logdet_c: f64 = 2.0 * lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                    let cinv = chol_inverse(&lower);
                    // M = P^{-1/2} (I − C⁻¹) P^{-1/2}
                    let mmat = DMatrix::from_fn(e, e, |i, j| {
                        let id = if i == j { 1.0 } else { 0.0 };
                        (id - cinv[(i, j)]) / (sp[i] * sp[j])
                    });
                    let mut alpha = nu.clone();
                    let mut gamma = nu.clone();
                    for k in 0..e {
                        alpha.column_mut(k).scale_mut(ia[k]);
                        gamma.column_mut(k).scale_mut(ib[k]);
                    }
                    let am = &alpha * &mmat;
                    let gm = &gamma * &mmat;
                    let la: Vec<f64> = (0..n)
                        .map(|i| {
                            let r = nu.row(i);
                            let quad: f64 = (0..e).map(|k| r[k] * r[k] * ia[k]).sum();
                            ha.signal_variance.ln() - 0.5 * quad + 0.5 * am.row(i).dot(&alpha.row(i))
                        })
                        .collect();
                    let lb: Vec<f64> = (0..n)
                        .map(|j| {
                            let r = nu.row(j);
                            let quad: f64 = (0..e).map(|k| r[k] * r[k] * ib[k]).sum();
                            hb.signal_variance.ln() - 0.5 * quad + 0.5 * gm.row(j).dot(&gamma.row(j))
                        })
                        .collect();
                    omega.gemm(1.0, &am, &gamma.transpose(), 0.0);
                    let cst = -0.5 * logdet_c;
                    for j in 0..n {
                        let lbj = lb[j] + cst;
                        // Q is symmetric when a = b
                        let first = if a == b { j } else { 0 };
                        for i in first..n {
                            let v = &mut omega[(i, j)];
                            *v = (*v + la[i] + lbj).exp() * weight(i, j);
                        }
                    }
                    if a == b {
                        omega.fill_upper_triangle_with_lower_triangle();
                    }
                    cinv
                };
                let r1 = omega.column_sum();
                let r2 = omega.row_sum().transpose();
                let f = r1.sum();
                let mut val = f - mean[a] * mean[b];
                if a == b {
                    val += ha.signal_variance + ha.noise_variance;
                }
                cov[(a, b)] = val;
                cov[(b, a)] = val;

                if want_jac {
                    let on = &omega * &nu;
                    let zc = nu.tr_mul(&on);
                    let mut nr1 = nu.clone();
                    let mut nr2 = nu.clone();
                    for i in 0..n {
                        nr1.row_mut(i).scale_mut(r1[i]);
                        nr2.row_mut(i).scale_mut(r2[i]);
                    }
                    let za = nu.tr_mul(&nr1);
                    let zb = nu.tr_mul(&nr2);
                    let zfull = DMatrix::from_fn(e, e, |i, j| {
                        ia[i] * za[(i, j)] * ia[j]
                            + ib[i] * zb[(i, j)] * ib[j]
                            + ia[i] * zc[(i, j)] * ib[j]
                            + ib[i] * zc[(j, i)] * ia[j]
                    });
                    let g1 = nu.tr_mul(&r1).component_mul(&ia) + nu.tr_mul(&r2).component_mul(&ib);
                    // R⁻¹ = P^{-1/2} C⁻¹ P^{1/2},  R⁻ᵀ = P^{1/2} C⁻¹ P^{-1/2}
                    let rinv = DMatrix::from_fn(e, e, |i, j| cinv[(i, j)] * sp[j] / sp[i]);
                    let rinv_t = rinv.transpose();
                    let df_dm = &rinv_t * &g1;
                    let pr = DMatrix::from_fn(e, e, |i, j| sp[i] * cinv[(i, j)] * sp[j]);
                    let df_ds = (&rinv_t * &zfull * &rinv) * 0.5 - pr * (0.5 * f);

                    let mut row = DVector::zeros(nb);
                    for k in 0..e {
                        row[k] = df_dm[k];
                    }
                    put_sym(row.as_mut_slice(), e, &df_ds);
                    row -= jmean.row(b).transpose() * mean[a] + jmean.row(a).transpose() * mean[b];
                    jcov.set_row(a * dd + b, &row.transpose());
                    jcov.set_row(b * dd + a, &row.transpose());
                }
            }
        }
    }

    Ok(Core {
        mean,
        cov,
        v: vmat,
        jac: want_jac.then_some(CoreJac {
            mean: jmean,
            cov: jcov,
            v: jv,
        }),
    })
}

/// GP dynamics over featurized states: `x_{t+1} = x_t + Δ(φ(x_t), u_t)`.
#[derive(Clone, Debug)]
pub struct TransitionModel {
    gp: GpModel,
    features: FeatureMap,
    control_dim: usize,
    mode: PropagationMode,
}

impl TransitionModel {
    pub fn new(gp: GpModel, features: FeatureMap, control_dim: usize) -> Result<Self> {
        if gp.input_dim() != features.dim() + control_dim {
            return Err(Error::Dimension(format!(
                "GP input dimension {} but {} features and {} controls",
                gp.input_dim(),
                features.dim(),
                control_dim
            )));
        }
        if gp.output_dim() != features.state_dim() {
            return Err(Error::Dimension(format!(
                "GP output dimension {} for state dimension {}",
                gp.output_dim(),
                features.state_dim()
            )));
        }
        Ok(TransitionModel {
            gp,
            features,
            control_dim,
            mode: PropagationMode::Full,
        })
    }

    pub fn with_mode(mut self, mode: PropagationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_gp(&self, gp: GpModel) -> Result<Self> {
        Ok(TransitionModel::new(gp, self.features.clone(), self.control_dim)?.with_mode(self.mode))
    }

    pub fn gp(&self) -> &GpModel {
        &self.gp
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn mode(&self) -> PropagationMode {
        self.mode
    }

    pub fn state_dim(&self) -> usize {
        self.features.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// GP input `[φ(x), u]` for a deterministic state.
    pub fn gp_input(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut v = self.features.apply(x);
        v.extend_from_slice(u);
        v
    }

    /// Model with the observed transition `(x, u) → x_next` appended.
    pub fn add_transition(&self, x: &[f64], u: &[f64], x_next: &[f64]) -> Result<Self> {
        let input = self.gp_input(x, u);
        let target: Vec<f64> = x_next.iter().zip(x).map(|(a, b)| a - b).collect();
        let gp = self.gp.add_datapoint(&input, &target)?;
        Ok(TransitionModel {
            gp,
            features: self.features.clone(),
            control_dim: self.control_dim,
            mode: self.mode,
        })
    }

    /// Input distribution of the GP: feature moments of `z` and `u`.
    pub fn augment(&self, z: &GaussState, u: &DVector<f64>) -> AugmentedState {
        let fm = self.features.moments(&z.mean, &z.cov);
        let ex = self.features.dim();
        let e = ex + u.len();
        let mut mean = DVector::zeros(e);
        mean.rows_mut(0, ex).copy_from(&fm.mean);
        mean.rows_mut(ex, u.len()).copy_from(u);
        let mut cov = DMatrix::zeros(e, e);
        cov.view_mut((0, 0), (ex, ex)).copy_from(&fm.cov);
        AugmentedState {
            mean,
            cov,
            state_dim: ex,
        }
    }

    fn check(&self, z: &GaussState, u: &DVector<f64>) -> Result<()> {
        if z.dim() != self.state_dim() || u.len() != self.control_dim {
            return Err(Error::Dimension(format!(
                "state {} / control {} for model ({}, {})",
                z.dim(),
                u.len(),
                self.state_dim(),
                self.control_dim
            )));
        }
        if !z.mean.iter().chain(z.cov.iter()).chain(u.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("propagation input".into()));
        }
        Ok(())
    }

    pub fn propagate(&self, z: &GaussState, u: &DVector<f64>) -> Result<GaussState> {
        self.check(z, u)?;
        Ok(self.propagate_impl(z, u, false)?.0)
    }

    pub fn propagate_jacobians(
        &self,
        z: &GaussState,
        u: &DVector<f64>,
    ) -> Result<(GaussState, PropagationJacobians)> {
        self.check(z, u)?;
        let (next, jac) = self.propagate_impl(z, u, true)?;
        Ok((next, jac.expect("requested")))
    }

    fn propagate_impl(
        &self,
        z: &GaussState,
        u: &DVector<f64>,
        want_jac: bool,
    ) -> Result<(GaussState, Option<PropagationJacobians>)> {
        let d = self.state_dim();
        let nu_ = self.control_dim;
        let ex = self.features.dim();
        let e = ex + nu_;
        let nb = e + e * e;
        let full = self.mode == PropagationMode::Full;
        let nvars = if want_jac { d + d * d + nu_ } else { 0 };
        let uoff = d + d * d;

        let in_cov = if full { z.cov.clone() } else { DMatrix::zeros(d, d) };
        let layout = JetLayout {
            nvars,
            mean_offset: want_jac.then_some(0),
            cov_offset: (want_jac && full).then_some(d),
        };
        let fj = self.features.moment_jets(&z.mean, &in_cov, layout);

        let mut m_aug = DVector::zeros(e);
        let mut s_aug = DMatrix::zeros(e, e);
        for k in 0..ex {
            m_aug[k] = fj.mean[k].v;
            for l in 0..ex {
                s_aug[(k, l)] = fj.cov[k][l].v;
            }
        }
        for k in 0..nu_ {
            m_aug[ex + k] = u[k];
        }

        let core = core_moments(&self.gp, &m_aug, &s_aug, full, want_jac)?;

        let mean = &z.mean + &core.mean;
        let cov = if full {
            let cross = DMatrix::from_fn(d, ex, |j, k| fj.cross[j][k].v);
            let c = &cross * core.v.rows(0, ex);
            &z.cov + &core.cov + &c + c.transpose()
        } else {
            DMatrix::from_diagonal(&DVector::from_iterator(
                d,
                self.gp.hypers().iter().map(|h| h.noise_variance),
            ))
        };
        if !mean.iter().chain(cov.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("propagated moments".into()));
        }
        let cov = psd_repair(&cov)?;
        let next = GaussState { mean, cov };

        if !want_jac {
            return Ok((next, None));
        }
        let cj = core.jac.expect("requested");

        // ∂[μ̃; vec Σ̃]/∂[μ; vec Σ; u]
        let mut jb = DMatrix::zeros(nb, nvars);
        for k in 0..ex {
            jb.set_row(k, &fj.mean[k].g.transpose());
            for l in 0..ex {
                jb.set_row(e + k * e + l, &fj.cov[k][l].g.transpose());
            }
        }
        for k in 0..nu_ {
            jb[(ex + k, uoff + k)] = 1.0;
        }

        let mut jmean = &cj.mean * &jb;
        for j in 0..d {
            jmean[(j, j)] += 1.0;
        }
        let mut jcov = DMatrix::zeros(d * d, nvars);
        if full {
            jcov = &cj.cov * &jb;
            let jvv = &cj.v * &jb;
            for j in 0..d {
                for l in 0..d {
                    let r = j * d + l;
                    jcov[(r, d + j * d + l)] += 1.0;
                    // C_jl + C_lj with C_jl = Σ_k cross_jk V_kl
                    for (x, y) in [(j, l), (l, j)] {
                        for k in 0..ex {
                            let cr = &fj.cross[x][k];
                            let vk = core.v[(k, y)];
                            for c in 0..nvars {
                                jcov[(r, c)] += cr.g[c] * vk + cr.v * jvv[(y * e + k, c)];
                            }
                        }
                    }
                }
            }
        }

        // Full-matrix coordinates to the upper-triangular layout.
        let pairs = vech_pairs(d);
        let nv = pairs.len();
        let in_cols = |jm: &DMatrix<f64>, row: usize| -> Vec<f64> {
            pairs
                .iter()
                .map(|&(i, k)| {
                    if i == k {
                        jm[(row, d + i * d + i)]
                    } else {
                        jm[(row, d + i * d + k)] + jm[(row, d + k * d + i)]
                    }
                })
                .collect()
        };
        let mut dmean_dcov = DMatrix::zeros(d, nv);
        for j in 0..d {
            for (c, v) in in_cols(&jmean, j).into_iter().enumerate() {
                dmean_dcov[(j, c)] = v;
            }
        }
        let mut dcov_dmean = DMatrix::zeros(nv, d);
        let mut dcov_dcov = DMatrix::zeros(nv, nv);
        let mut dcov_du = DMatrix::zeros(nv, nu_);
        for (r, &(i, k)) in pairs.iter().enumerate() {
            let row = i * d + k;
            for j in 0..d {
                dcov_dmean[(r, j)] = jcov[(row, j)];
            }
            for (c, v) in in_cols(&jcov, row).into_iter().enumerate() {
                dcov_dcov[(r, c)] = v;
            }
            for j in 0..nu_ {
                dcov_du[(r, j)] = jcov[(row, uoff + j)];
            }
        }
        let jac = PropagationJacobians {
            dmean_dmean: jmean.columns(0, d).into_owned(),
            dmean_dcov,
            dcov_dmean,
            dcov_dcov,
            dmean_du: jmean.columns(uoff, nu_).into_owned(),
            dcov_du,
        };
        if !jac.is_finite() {
            return Err(Error::NonFinite("propagation Jacobian".into()));
        }
        Ok((next, Some(jac)))
    }
}

/// `vech` length helper re-exported for flat layouts.
pub fn flat_cov_len(d: usize) -> usize {
    vech_len(d)
}
