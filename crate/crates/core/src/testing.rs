//! Random instances and numerical oracles shared by the test suites and the
//! `verify` command.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::features::FeatureMap;
use crate::gp::{GpDataset, GpModel, KernelHyper};
use crate::moments::{GaussState, TransitionModel};

/// Draws from `N(mean, cov)` for a PSD `cov` through its eigen-decomposition.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let eig = crate::linalg::symmetrize(cov).symmetric_eigen();
        let mut factor = eig.eigenvectors.clone();
        for (j, lam) in eig.eigenvalues.iter().enumerate() {
            factor.column_mut(j).scale_mut(lam.max(0.0).sqrt());
        }
        GaussianSampler {
            mean: mean.clone(),
            factor,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.mean.len();
        let xi = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.mean + &self.factor * xi
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Random SPD matrix `A Aᵀ + floor·I` with entries of `A` scaled by `scale`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| scale * standard_normal(rng));
    let mut s = &a * a.transpose();
    for i in 0..d {
        s[(i, i)] += floor;
    }
    crate::linalg::symmetrize(&s)
}

pub fn random_gauss_state<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> GaussState {
    let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    GaussState {
        mean,
        cov: random_spd(rng, d, scale, 0.01 * scale * scale),
    }
}

/// GP over `e` inputs and `d` outputs fitted to a smooth random function.
pub fn random_gp<R: Rng + ?Sized>(rng: &mut R, n: usize, e: usize, d: usize) -> GpModel {
    let x = DMatrix::from_fn(n, e, |_, _| rng.random_range(-2.0..2.0));
    let w = DMatrix::from_fn(d, e, |_, _| rng.random_range(-1.0..1.0));
    let phase: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
    let y = DMatrix::from_fn(n, d, |i, a| {
        let s: f64 = (0..e).map(|k| w[(a, k)] * x[(i, k)]).sum();
        0.5 * (s + phase[a]).sin() + 0.02 * standard_normal(rng)
    });
    let hypers = (0..d)
        .map(|_| {
            KernelHyper::new(
                rng.random_range(0.3..1.5),
                (0..e).map(|_| rng.random_range(0.7..2.5)).collect(),
                rng.random_range(1e-3..1e-2),
            )
            .expect("valid random hypers")
        })
        .collect();
    GpModel::new(GpDataset::new(x, y).expect("finite data"), hypers).expect("factorizable")
}

/// Raw-state transition model with a random GP.
pub fn random_transition_model<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    d: usize,
    u: usize,
) -> TransitionModel {
    let gp = random_gp(rng, n, d + u, d);
    TransitionModel::new(gp, FeatureMap::identity(d), u).expect("consistent dimensions")
}

/// Sample moments with standard errors.
#[derive(Clone, Debug)]
pub struct McMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub mean_se: DVector<f64>,
    pub cov_se: DMatrix<f64>,
}

impl McMoments {
    pub fn from_samples(samples: &[DVector<f64>]) -> Self {
        let n = samples.len() as f64;
        let d = samples[0].len();
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += s;
        }
        mean /= n;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut m2 = DMatrix::<f64>::zeros(d, d);
        for s in samples {
            let c = s - &mean;
            for i in 0..d {
                for j in 0..d {
                    let w = c[i] * c[j];
                    cov[(i, j)] += w;
                    m2[(i, j)] += w * w;
                }
            }
        }
        cov /= n - 1.0;
        let cov_se = DMatrix::from_fn(d, d, |i, j| {
            let ew2: f64 = m2[(i, j)] / n;
            let ew: f64 = cov[(i, j)] * (n - 1.0) / n;
            ((ew2 - ew * ew).max(0.0) / n).sqrt()
        });
        let mean_se = DVector::from_fn(d, |i, _| (cov[(i, i)] / n).sqrt());
        McMoments {
            mean,
            cov,
            mean_se,
            cov_se,
        }
    }

    /// Largest `|analytic − estimate| / se` over the mean and covariance.
    pub fn worst_z(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let zm = (0..mean.len())
            .map(|i| z_score(mean[i], self.mean[i], self.mean_se[i]))
            .fold(0.0, f64::max);
        let zc = (0..cov.nrows())
            .flat_map(|i| (i..cov.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| z_score(cov[(i, j)], self.cov[(i, j)], self.cov_se[(i, j)]))
            .fold(0.0, f64::max);
        zm.max(zc)
    }
}

fn z_score(a: f64, b: f64, se: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= 1e-12 {
        0.0
    } else {
        diff / se.max(1e-300)
    }
}

/// Monte-Carlo moments of `x + Δ`: the state is sampled from `z`, the GP
/// output from its posterior at each sample, plus process noise.
pub fn mc_propagate<R: Rng + ?Sized>(
    model: &TransitionModel,
    z: &GaussState,
    u: &DVector<f64>,
    samples: usize,
    rng: &mut R,
) -> McMoments {
    let sampler = GaussianSampler::new(&z.mean, &z.cov);
    let gp = model.gp();
    let out: Vec<DVector<f64>> = (0..samples)
        .map(|_| {
            let x = sampler.sample(rng);
            let input = model.gp_input(x.as_slice(), u.as_slice());
            let (m, v) = gp.predict(&input).expect("valid query");
            DVector::from_fn(x.len(), |a, _| {
                let s2 = v[a] + gp.hypers()[a].noise_variance;
                x[a] + m[a] + s2.sqrt() * standard_normal(rng)
            })
        })
        .collect();
    McMoments::from_samples(&out)
}

/// Central finite-difference Jacobian of `f` at `x`.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let f0 = f(x);
    let mut j = DMatrix::zeros(f0.len(), x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        j.set_column(k, &col);
    }
    j
}

/// `‖a − b‖_F / max(‖b‖_F, floor)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

/// Samples of a stage cost for Monte-Carlo checks of its expectation.
///
/// Quadratic costs depend on the first two moments only, so states are
/// sampled directly. The saturating closed form is the expectation under the
/// Gaussian approximation of the cost-space image, which is sampled instead
/// (for the raw-state image the two coincide).
pub fn mc_cost_samples<R: Rng + ?Sized>(
    spec: &crate::cost::CostSpec,
    z: &GaussState,
    u: &DVector<f64>,
    samples: usize,
    rng: &mut R,
) -> crate::Result<Vec<f64>> {
    use crate::cost::{CostFeature, CostKind};
    let control = u.dot(&(&spec.control_penalty * u));
    if spec.kind == CostKind::Quadratic || spec.feature == CostFeature::RawState {
        let s = GaussianSampler::new(&z.mean, &z.cov);
        return (0..samples)
            .map(|_| spec.pointwise(s.sample(rng).as_slice(), u.as_slice()))
            .collect();
    }
    let (m, cov) = spec.image_moments(z)?;
    let s = GaussianSampler::new(&m, &cov);
    Ok((0..samples)
        .map(|_| {
            let r = s.sample(rng) - &spec.target;
            1.0 - (-0.5 * r.dot(&(&spec.weight * &r))).exp() + control
        })
        .collect())
}
