//! Trigonometric input features and their exact Gaussian moments.
//!
//! Angles are periodic, so the GP sees `(sin θ, cos θ)` in place of `θ`.
//! For `x ~ N(μ, Σ)` and a fixed integer combination `c` of angles,
//!
//! ```text
//! E[sin(cᵀθ)] = sin(cᵀμ) exp(-½ cᵀΣc)
//! E[cos(cᵀθ)] = cos(cᵀμ) exp(-½ cᵀΣc)
//! ```
//!
//! and products of sines and cosines reduce to such terms through the
//! sum/difference identities. Cross-covariances between a raw coordinate
//! and a trigonometric feature follow from Stein's lemma.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::jet::Jet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feature {
    Raw(usize),
    Sin(usize),
    Cos(usize),
}

/// Ordered list of features computed from a state vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    state_dim: usize,
    features: Vec<Feature>,
}

/// Gaussian approximation of the feature vector together with its
/// cross-covariance with the state.
#[derive(Clone, Debug)]
pub struct FeatureMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `cov(x, f)`, state rows by feature columns.
    pub cross: DMatrix<f64>,
}

/// Same as [`FeatureMoments`] with every entry carried as a [`Jet`].
#[derive(Clone, Debug)]
pub struct FeatureMomentJets {
    pub mean: Vec<Jet>,
    pub cov: Vec<Vec<Jet>>,
    pub cross: Vec<Vec<Jet>>,
}

/// Where the state mean and covariance live in a jet's variable vector.
/// `None` means the block is held constant.
#[derive(Clone, Copy, Debug)]
pub struct JetLayout {
    pub nvars: usize,
    pub mean_offset: Option<usize>,
    /// Row-major full-matrix block of `d²` variables.
    pub cov_offset: Option<usize>,
}

impl FeatureMap {
    pub fn new(state_dim: usize, features: Vec<Feature>) -> Self {
        for f in &features {
            let (Feature::Raw(i) | Feature::Sin(i) | Feature::Cos(i)) = *f;
            assert!(i < state_dim, "feature index {i} out of range for state dimension {state_dim}");
        }
        FeatureMap { state_dim, features }
    }

    /// Raw state, no trigonometric augmentation.
    pub fn identity(state_dim: usize) -> Self {
        FeatureMap::new(state_dim, (0..state_dim).map(Feature::Raw).collect())
    }

    /// Non-angle coordinates in order, followed by `(sin, cos)` for each
    /// angle coordinate in `angles`.
    pub fn with_angles(state_dim: usize, angles: &[usize]) -> Self {
        let mut f: Vec<Feature> = (0..state_dim)
            .filter(|i| !angles.contains(i))
            .map(Feature::Raw)
            .collect();
        for &a in angles {
            f.push(Feature::Sin(a));
            f.push(Feature::Cos(a));
        }
        FeatureMap::new(state_dim, f)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn is_identity(&self) -> bool {
        self.features.len() == self.state_dim
            && self
                .features
                .iter()
                .enumerate()
                .all(|(i, f)| *f == Feature::Raw(i))
    }

    /// Deterministic feature vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.features
            .iter()
            .map(|f| match *f {
                Feature::Raw(i) => x[i],
                Feature::Sin(i) => x[i].sin(),
                Feature::Cos(i) => x[i].cos(),
            })
            .collect()
    }

    pub fn moments(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> FeatureMoments {
        let layout = JetLayout {
            nvars: 0,
            mean_offset: None,
            cov_offset: None,
        };
        let j = self.moment_jets(mean, cov, layout);
        let f = self.dim();
        let d = self.state_dim;
        FeatureMoments {
            mean: DVector::from_iterator(f, j.mean.iter().map(|x| x.v)),
            cov: DMatrix::from_fn(f, f, |p, q| j.cov[p][q].v),
            cross: DMatrix::from_fn(d, f, |i, p| j.cross[i][p].v),
        }
    }

    /// Feature moments with gradients over the variables described by
    /// `layout`. Covariance variables are symmetrized so that the jets
    /// describe the symmetric extension `f((Σ + Σᵀ)/2)`.
    pub fn moment_jets(
        &self,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        layout: JetLayout,
    ) -> FeatureMomentJets {
        let d = self.state_dim;
        let n = layout.nvars;
        let mu: Vec<Jet> = (0..d)
            .map(|i| match layout.mean_offset {
                Some(o) => Jet::var(mean[i], o + i, n),
                None => Jet::constant(mean[i], n),
            })
            .collect();
        let sig: Vec<Vec<Jet>> = (0..d)
            .map(|i| {
                (0..d)
                    .map(|k| match layout.cov_offset {
                        Some(o) => {
                            let mut jt = Jet::constant(0.5 * (cov[(i, k)] + cov[(k, i)]), n);
                            jt.g[o + i * d + k] += 0.5;
                            jt.g[o + k * d + i] += 0.5;
                            jt
                        }
                        None => Jet::constant(0.5 * (cov[(i, k)] + cov[(k, i)]), n),
                    })
                    .collect()
            })
            .collect();
        let ctx = Ctx { mu: &mu, sig: &sig, n };

        let fmean: Vec<Jet> = self.features.iter().map(|f| ctx.mean_of(*f)).collect();
        let nf = self.dim();
        let mut fcov: Vec<Vec<Jet>> = vec![Vec::with_capacity(nf); nf];
        for p in 0..nf {
            for q in 0..nf {
                let jt = if q < p {
                    fcov[q][p].clone()
                } else {
                    ctx.cov_of(self.features[p], self.features[q], &fmean[p], &fmean[q])
                };
                fcov[p].push(jt);
            }
        }
        let cross: Vec<Vec<Jet>> = (0..d)
            .map(|i| {
                (0..nf)
                    .map(|p| ctx.cov_of(Feature::Raw(i), self.features[p], &mu[i], &fmean[p]))
                    .collect()
            })
            .collect();
        FeatureMomentJets {
            mean: fmean,
            cov: fcov,
            cross,
        }
    }
}

struct Ctx<'a> {
    mu: &'a [Jet],
    sig: &'a [Vec<Jet>],
    n: usize,
}

#[derive(Clone, Copy)]
enum Trig {
    Sin,
    Cos,
}

impl Ctx<'_> {
    /// `E[trig(Σ c_k θ_k)]` for a sparse integer combination.
    fn expect_trig(&self, comb: &[(usize, f64)], kind: Trig) -> Jet {
        let mut arg = Jet::constant(0.0, self.n);
        let mut var = Jet::constant(0.0, self.n);
        for &(k, ck) in comb {
            arg.axpy(ck, &self.mu[k]);
            for &(l, cl) in comb {
                var.axpy(ck * cl, &self.sig[k][l]);
            }
        }
        let damp = var.scale(-0.5).exp();
        let t = match kind {
            Trig::Sin => arg.sin(),
            Trig::Cos => arg.cos(),
        };
        &t * &damp
    }

    fn mean_of(&self, f: Feature) -> Jet {
        match f {
            Feature::Raw(i) => self.mu[i].clone(),
            Feature::Sin(i) => self.expect_trig(&[(i, 1.0)], Trig::Sin),
            Feature::Cos(i) => self.expect_trig(&[(i, 1.0)], Trig::Cos),
        }
    }

    fn cov_of(&self, a: Feature, b: Feature, ma: &Jet, mb: &Jet) -> Jet {
        use Feature::*;
        match (a, b) {
            (Raw(i), Raw(j)) => self.sig[i][j].clone(),
            // Stein: cov(x_i, g(θ_k)) = Σ_ik E[g'(θ_k)]
            (Raw(i), Sin(k)) | (Sin(k), Raw(i)) => {
                &self.sig[i][k] * &self.expect_trig(&[(k, 1.0)], Trig::Cos)
            }
            (Raw(i), Cos(k)) | (Cos(k), Raw(i)) => {
                -&(&self.sig[i][k] * &self.expect_trig(&[(k, 1.0)], Trig::Sin))
            }
            (Sin(k), Sin(l)) => {
                let diff = self.expect_trig(&[(k, 1.0), (l, -1.0)], Trig::Cos);
                let sum = self.expect_trig(&[(k, 1.0), (l, 1.0)], Trig::Cos);
                &(&diff - &sum).scale(0.5) - &(ma * mb)
            }
            (Cos(k), Cos(l)) => {
                let diff = self.expect_trig(&[(k, 1.0), (l, -1.0)], Trig::Cos);
                let sum = self.expect_trig(&[(k, 1.0), (l, 1.0)], Trig::Cos);
                &(&diff + &sum).scale(0.5) - &(ma * mb)
            }
            (Sin(k), Cos(l)) => {
                let sum = self.expect_trig(&[(k, 1.0), (l, 1.0)], Trig::Sin);
                let diff = self.expect_trig(&[(k, 1.0), (l, -1.0)], Trig::Sin);
                &(&sum + &diff).scale(0.5) - &(ma * mb)
            }
            (Cos(l), Sin(k)) => {
                let sum = self.expect_trig(&[(k, 1.0), (l, 1.0)], Trig::Sin);
                let diff = self.expect_trig(&[(k, 1.0), (l, -1.0)], Trig::Sin);
                &(&sum + &diff).scale(0.5) - &(ma * mb)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sample(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let l = cov.clone().cholesky().unwrap().unpack();
        let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
        mean + l * z
    }

    #[test]
    fn gaussian_trig_identity_zero_mean() {
        let fm = FeatureMap::with_angles(1, &[0]);
        let s2 = 0.7;
        let m = fm.moments(&DVector::from_element(1, 0.0), &DMatrix::from_element(1, 1, s2));
        assert!(m.mean[0].abs() < 1e-15);
        assert!((m.mean[1] - (-s2 / 2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn moments_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = FeatureMap::with_angles(3, &[0, 2]);
        let mean = DVector::from_vec(vec![0.4, -0.3, 2.0]);
        let a = DMatrix::from_fn(3, 3, |_, _| StandardNormal.sample(&mut rng)) * 0.4;
        let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.05;
        let m = fm.moments(&mean, &cov);
        let n = 200_000;
        let f = fm.dim();
        let mut s1 = DVector::zeros(f);
        let mut s2 = DMatrix::zeros(f, f);
        let mut sx = DMatrix::zeros(3, f);
        for _ in 0..n {
            let x = sample(&mean, &cov, &mut rng);
            let v = DVector::from_vec(fm.apply(x.as_slice()));
            s1 += &v;
            s2 += &v * v.transpose();
            sx += (&x - &mean) * v.transpose();
        }
        let nf = n as f64;
        let emean = &s1 / nf;
        let ecov = &s2 / nf - &emean * emean.transpose();
        let ecross = &sx / nf;
        assert!((emean - &m.mean).amax() < 0.01);
        assert!((ecov - &m.cov).amax() < 0.01);
        assert!((ecross - &m.cross).amax() < 0.01);
    }

    #[test]
    fn jets_match_finite_differences() {
        let fm = FeatureMap::with_angles(3, &[1, 2]);
        let mean = DVector::from_vec(vec![0.4, -0.3, 2.0]);
        let cov = DMatrix::from_row_slice(3, 3, &[0.3, 0.05, 0.02, 0.05, 0.2, -0.04, 0.02, -0.04, 0.25]);
        let nv = 3 + 9;
        let layout = JetLayout {
            nvars: nv,
            mean_offset: Some(0),
            cov_offset: Some(3),
        };
        let j = fm.moment_jets(&mean, &cov, layout);
        let h = 1e-6;
        let flat = |m: &FeatureMoments| -> Vec<f64> {
            m.mean.iter().chain(m.cov.iter()).chain(m.cross.iter()).copied().collect()
        };
        let jet_flat: Vec<&Jet> = {
            let f = fm.dim();
            let mut v: Vec<&Jet> = j.mean.iter().collect();
            // column-major to match nalgebra iteration order
            for q in 0..f {
                for p in 0..f {
                    v.push(&j.cov[p][q]);
                }
            }
            for p in 0..f {
                for i in 0..3 {
                    v.push(&j.cross[i][p]);
                }
            }
            v
        };
        for var in 0..nv {
            let (mut mp, mut mm) = (mean.clone(), mean.clone());
            let (mut cp, mut cm) = (cov.clone(), cov.clone());
            if var < 3 {
                mp[var] += h;
                mm[var] -= h;
            } else {
                let (r, c) = ((var - 3) / 3, (var - 3) % 3);
                // symmetric extension: a perturbation of one entry moves the
                // symmetric part by half in both positions
                cp[(r, c)] += h / 2.0;
                cp[(c, r)] += h / 2.0;
                cm[(r, c)] -= h / 2.0;
                cm[(c, r)] -= h / 2.0;
            }
            let fp = flat(&fm.moments(&mp, &cp));
            let fmn = flat(&fm.moments(&mm, &cm));
            for (k, jt) in jet_flat.iter().enumerate() {
                let fd = (fp[k] - fmn[k]) / (2.0 * h);
                assert!((fd - jt.g[var]).abs() < 1e-7, "var {var} out {k}: {fd} vs {}", jt.g[var]);
            }
        }
    }
}
