//! Gaussian-process transition model.
//!
//! One independent GP with a squared-exponential (ARD) kernel per output
//! dimension. Each GP maps a featurized state-control input to the change
//! of one state coordinate over one time step.
//!
//! Length-scales are stored as `ℓ_k`; the kernel uses the diagonal matrix
//! `Λ = diag(ℓ_k²)`:
//!
//! ```text
//! k(x, x') = σ_f² exp(-½ (x - x')ᵀ Λ⁻¹ (x - x'))
//! ```

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_inverse, chol_solve, cholesky_with_jitter, symmetrize};

/// Smallest admissible length-scale during training.
pub const LENGTH_SCALE_FLOOR: f64 = 1e-3;
/// Smallest admissible noise variance during training.
pub const NOISE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Hyperparameters of one output dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelHyper {
    pub fn new(signal_variance: f64, length_scales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let h = KernelHyper {
            signal_variance,
            length_scales,
            noise_variance,
        };
        h.validate(None)?;
        Ok(h)
    }

    pub fn input_dim(&self) -> usize {
        self.length_scales.len()
    }

    pub fn validate(&self, input_dim: Option<usize>) -> Result<()> {
        if let Some(e) = input_dim {
            if self.length_scales.len() != e {
                return Err(Error::Dimension(format!(
                    "{} length-scales for input dimension {e}",
                    self.length_scales.len()
                )));
            }
        }
        if !(self.signal_variance >= 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::InvalidHyper(format!(
                "signal variance {} must be finite and ≥ 0",
                self.signal_variance
            )));
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidHyper(format!(
                "noise variance {} must be finite and > 0",
                self.noise_variance
            )));
        }
        if let Some(l) = self
            .length_scales
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(Error::InvalidHyper(format!("length-scale {l} must be finite and > 0")));
        }
        Ok(())
    }

    /// `1 / ℓ_k²` for each input dimension (the diagonal of `Λ⁻¹`).
    pub fn inverse_lambda(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.length_scales.len(),
            self.length_scales.iter().map(|l| 1.0 / (l * l)),
        )
    }

    /// Kernel value; callers guarantee matching dimensions.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.length_scales) {
            let d = (x - y) / l;
            r2 += d * d;
        }
        self.signal_variance * (-0.5 * r2).exp()
    }

    /// `[ln ℓ_1, …, ln ℓ_E, ln σ_f², ln σ_n²]`.
    pub fn to_log_params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.length_scales.iter().map(|l| l.ln()).collect();
        p.push(self.signal_variance.ln());
        p.push(self.noise_variance.ln());
        p
    }

    pub fn from_log_params(p: &[f64]) -> Self {
        let e = p.len() - 2;
        KernelHyper {
            length_scales: p[..e].iter().map(|v| v.exp()).collect(),
            signal_variance: p[e].exp(),
            noise_variance: p[e + 1].exp(),
        }
    }

    /// Data-driven starting point: input standard deviations as length-scales,
    /// target variance as signal variance and 1% of it as noise.
    pub fn heuristic(dataset: &GpDataset, output: usize) -> Self {
        let n = dataset.len();
        let e = dataset.input_dim();
        let length_scales = (0..e)
            .map(|k| {
                if n < 2 {
                    return 1.0;
                }
                let col = dataset.inputs.column(k);
                let mean = col.mean();
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                var.sqrt().max(0.1)
            })
            .collect();
        let var = if n < 2 {
            1.0
        } else {
            // second moment, the prior mean being zero
            let col = dataset.targets.column(output);
            col.iter().map(|v| v * v).sum::<f64>() / n as f64
        };
        let var = var.max(1e-4);
        KernelHyper {
            signal_variance: var,
            length_scales,
            noise_variance: (0.01 * var).max(NOISE_FLOOR),
        }
    }
}

/// Squared-exponential kernel between two input vectors.
pub fn kernel_eval(xi: &[f64], xj: &[f64], h: &KernelHyper) -> Result<f64> {
    if xi.len() != xj.len() || xi.len() != h.input_dim() {
        return Err(Error::Dimension(format!(
            "kernel inputs of length {} and {} with {} length-scales",
            xi.len(),
            xj.len(),
            h.input_dim()
        )));
    }
    Ok(h.eval(xi, xj))
}

/// Training inputs (rows) and per-dimension targets (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct GpDataset {
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
}

impl GpDataset {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::InvalidData(format!(
                "{} input rows but {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if !inputs.iter().chain(targets.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset".into()));
        }
        Ok(GpDataset { inputs, targets })
    }

    pub fn empty(input_dim: usize, output_dim: usize) -> Self {
        GpDataset {
            inputs: DMatrix::zeros(0, input_dim),
            targets: DMatrix::zeros(0, output_dim),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    fn check_point(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() || y.len() != self.output_dim() {
            return Err(Error::Dimension(format!(
                "data point ({}, {}) for dataset ({}, {})",
                x.len(),
                y.len(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        if !x.iter().chain(y).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("data point".into()));
        }
        Ok(())
    }

    pub fn push(&mut self, x: &[f64], y: &[f64]) -> Result<()> {
        self.check_point(x, y)?;
        let n = self.len();
        let inputs = std::mem::replace(&mut self.inputs, DMatrix::zeros(0, 0));
        let targets = std::mem::replace(&mut self.targets, DMatrix::zeros(0, 0));
        self.inputs = inputs.insert_row(n, 0.0);
        self.targets = targets.insert_row(n, 0.0);
        self.inputs.row_mut(n).copy_from_slice(x);
        self.targets.row_mut(n).copy_from_slice(y);
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DimCache {
    lower: DMatrix<f64>,
    jitter: f64,
    inv_k: DMatrix<f64>,
    beta: DVector<f64>,
}

/// Trained GP dynamics model: hyperparameters, data and cached solves.
///
/// The value is immutable; [`GpModel::add_datapoint`] returns a new model.
#[derive(Clone, Debug)]
pub struct GpModel {
    hypers: Vec<KernelHyper>,
    dataset: GpDataset,
    cache: Vec<DimCache>,
}

fn kernel_matrix(inputs: &DMatrix<f64>, h: &KernelHyper) -> DMatrix<f64> {
    let n = inputs.nrows();
    let e = inputs.ncols();
    let il = h.inverse_lambda();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = h.signal_variance;
        for j in 0..i {
            let mut r2 = 0.0;
            for c in 0..e {
                let d = inputs[(i, c)] - inputs[(j, c)];
                r2 += d * d * il[c];
            }
            let v = h.signal_variance * (-0.5 * r2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn kernel_column(inputs: &DMatrix<f64>, x: &[f64], h: &KernelHyper) -> DVector<f64> {
    let il = h.inverse_lambda();
    DVector::from_iterator(
        inputs.nrows(),
        inputs.row_iter().map(|row| {
            let r2: f64 = row
                .iter()
                .zip(x)
                .zip(il.iter())
                .map(|((a, b), w)| (a - b) * (a - b) * w)
                .sum();
            h.signal_variance * (-0.5 * r2).exp()
        }),
    )
}

impl DimCache {
    fn build(inputs: &DMatrix<f64>, y: DVector<f64>, h: &KernelHyper) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 {
            return Ok(DimCache {
                lower: DMatrix::zeros(0, 0),
                jitter: 0.0,
                inv_k: DMatrix::zeros(0, 0),
                beta: DVector::zeros(0),
            });
        }
        let mut k = kernel_matrix(inputs, h);
        for i in 0..n {
            k[(i, i)] += h.noise_variance;
        }
        let chol = cholesky_with_jitter(&k)?;
        let beta = chol_solve(&chol.lower, &y);
        let inv_k = chol_inverse(&chol.lower);
        Ok(DimCache {
            lower: chol.lower,
            jitter: chol.jitter,
            inv_k,
            beta,
        })
    }

    /// Bordered update for one appended point; `None` when a full rebuild
    /// is required (jitter in use or loss of positive definiteness).
    fn append(&self, k: &DVector<f64>, kss: f64, y: &DVector<f64>) -> Option<Self> {
        if self.jitter != 0.0 {
            return None;
        }
        let n = k.len();
        let l = self.lower.solve_lower_triangular(k)?;
        let d2 = kss - l.norm_squared();
        if !(d2 > 0.0) || !d2.is_finite() {
            return None;
        }
        let a = &self.inv_k * k;
        let s = kss - k.dot(&a);
        if !(s > 0.0) {
            return None;
        }
        let mut lower = self.lower.clone().insert_row(n, 0.0).insert_column(n, 0.0);
        for j in 0..n {
            lower[(n, j)] = l[j];
        }
        lower[(n, n)] = d2.sqrt();

        let mut inv_k = self.inv_k.clone().insert_row(n, 0.0).insert_column(n, 0.0);
        {
            let mut block = inv_k.view_mut((0, 0), (n, n));
            block.ger(1.0 / s, &a, &a, 1.0);
        }
        for i in 0..n {
            inv_k[(i, n)] = -a[i] / s;
            inv_k[(n, i)] = -a[i] / s;
        }
        inv_k[(n, n)] = 1.0 / s;
        let beta = &inv_k * y;
        Some(DimCache {
            lower,
            jitter: 0.0,
            inv_k,
            beta,
        })
    }
}

impl GpModel {
    /// Build a model and its cache. An empty dataset is allowed and yields
    /// the prior.
    pub fn new(dataset: GpDataset, hypers: Vec<KernelHyper>) -> Result<Self> {
        if hypers.len() != dataset.output_dim() {
            return Err(Error::Dimension(format!(
                "{} hyperparameter sets for {} outputs",
                hypers.len(),
                dataset.output_dim()
            )));
        }
        for h in &hypers {
            h.validate(Some(dataset.input_dim()))?;
        }
        let cache = hypers
            .iter()
            .enumerate()
            .map(|(d, h)| DimCache::build(&dataset.inputs, dataset.targets.column(d).into_owned(), h))
            .collect::<Result<Vec<_>>>()?;
        Ok(GpModel {
            hypers,
            dataset,
            cache,
        })
    }

    pub fn hypers(&self) -> &[KernelHyper] {
        &self.hypers
    }

    pub fn dataset(&self) -> &GpDataset {
        &self.dataset
    }

    pub fn input_dim(&self) -> usize {
        self.dataset.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.dataset.output_dim()
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    /// `β_d = (K_d + σ_d² I)⁻¹ y_d`.
    pub fn beta(&self, d: usize) -> &DVector<f64> {
        &self.cache[d].beta
    }

    /// `(K_d + σ_d² I)⁻¹`.
    pub fn inv_k(&self, d: usize) -> &DMatrix<f64> {
        &self.cache[d].inv_k
    }

    /// Jitter that was added to the diagonal of output `d`'s kernel matrix.
    pub fn jitter(&self, d: usize) -> f64 {
        self.cache[d].jitter
    }

    /// Same data, new hyperparameters.
    pub fn with_hypers(&self, hypers: Vec<KernelHyper>) -> Result<Self> {
        GpModel::new(self.dataset.clone(), hypers)
    }

    /// Posterior mean and latent variance at a deterministic input.
    pub fn predict(&self, x: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "query of length {} for input dimension {}",
                x.len(),
                self.input_dim()
            )));
        }
        let dd = self.output_dim();
        let mut mean = DVector::zeros(dd);
        let mut var = DVector::zeros(dd);
        for d in 0..dd {
            let h = &self.hypers[d];
            let c = &self.cache[d];
            let k = kernel_column(&self.dataset.inputs, x, h);
            mean[d] = k.dot(&c.beta);
            let v = h.signal_variance - k.dot(&(&c.inv_k * &k));
            var[d] = v.clamp(f64::MIN_POSITIVE, h.signal_variance.max(f64::MIN_POSITIVE));
        }
        Ok((mean, var))
    }

    /// Model with one more observation and unchanged hyperparameters.
    pub fn add_datapoint(&self, x: &[f64], y: &[f64]) -> Result<GpModel> {
        let mut dataset = self.dataset.clone();
        dataset.push(x, y)?;
        let mut cache = Vec::with_capacity(self.cache.len());
        for (d, (h, c)) in self.hypers.iter().zip(&self.cache).enumerate() {
            let k = kernel_column(&self.dataset.inputs, x, h);
            let kss = h.signal_variance + h.noise_variance;
            let yd = dataset.targets.column(d).into_owned();
            let updated = match c.append(&k, kss, &yd) {
                Some(u) => u,
                None => DimCache::build(&dataset.inputs, yd, h)?,
            };
            cache.push(updated);
        }
        Ok(GpModel {
            hypers: self.hypers.clone(),
            dataset,
            cache,
        })
    }

    /// Write hyperparameters and data as pretty-printed JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = GpModelFile::from(self);
        let text = serde_json::to_string_pretty(&file)?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: GpModelFile = serde_json::from_str(&text)?;
        file.into_model()
    }
}

/// On-disk model layout. Field names are part of the file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpModelFile {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hypers: Vec<KernelHyper>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

pub const MODEL_FORMAT: &str = "gp-mpc/gp-model";

impl From<&GpModel> for GpModelFile {
    fn from(m: &GpModel) -> Self {
        let rows = |a: &DMatrix<f64>| {
            a.row_iter()
                .map(|r| r.iter().copied().collect())
                .collect::<Vec<Vec<f64>>>()
        };
        GpModelFile {
            format: MODEL_FORMAT.into(),
            version: 1,
            input_dim: m.input_dim(),
            output_dim: m.output_dim(),
            hypers: m.hypers.clone(),
            inputs: rows(&m.dataset.inputs),
            targets: rows(&m.dataset.targets),
        }
    }
}

impl GpModelFile {
    pub fn into_model(self) -> Result<GpModel> {
        if self.format != MODEL_FORMAT || self.version != 1 {
            return Err(Error::InvalidData(format!(
                "unsupported model file {} v{}",
                self.format, self.version
            )));
        }
        let n = self.inputs.len();
        let to_matrix = |rows: &[Vec<f64>], cols: usize| -> Result<DMatrix<f64>> {
            if rows.iter().any(|r| r.len() != cols) {
                return Err(Error::Dimension("ragged rows in model file".into()));
            }
            Ok(DMatrix::from_row_iterator(
                rows.len(),
                cols,
                rows.iter().flatten().copied(),
            ))
        };
        let inputs = to_matrix(&self.inputs, self.input_dim)?;
        let targets = to_matrix(&self.targets, self.output_dim)?;
        if targets.nrows() != n {
            return Err(Error::InvalidData("input/target row mismatch".into()));
        }
        GpModel::new(GpDataset::new(inputs, targets)?, self.hypers)
    }
}

/// Log evidence of one output dimension and its gradient with respect to
/// the log-parameters of [`KernelHyper::to_log_params`].
fn log_evidence_dim(
    inputs: &DMatrix<f64>,
    y: &DVector<f64>,
    h: &KernelHyper,
) -> Result<(f64, DVector<f64>)> {
    let n = inputs.nrows();
    let e = inputs.ncols();
    let mut grad = DVector::zeros(e + 2);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let kf = kernel_matrix(inputs, h);
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += h.noise_variance;
    }
    let chol = cholesky_with_jitter(&k)?;
    let alpha = chol_solve(&chol.lower, y);
    let logdet: f64 = chol.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let value = -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * LN_2PI;

    // ∂/∂θ = ½ tr((ααᵀ - K⁻¹) ∂K/∂θ)
    let mut a = chol_inverse(&chol.lower);
    a.ger(-1.0, &alpha, &alpha, 1.0);
    a.neg_mut();
    let il = h.inverse_lambda();
    for i in 0..n {
        for j in 0..i {
            let w = a[(i, j)] * kf[(i, j)];
            for c in 0..e {
                let d = inputs[(i, c)] - inputs[(j, c)];
                grad[c] += w * d * d * il[c];
            }
        }
    }
    let mut tr_kf = 0.0;
    let mut tr_i = 0.0;
    for i in 0..n {
        tr_i += a[(i, i)];
        for j in 0..n {
            tr_kf += a[(i, j)] * kf[(i, j)];
        }
    }
    grad[e] = 0.5 * tr_kf;
    grad[e + 1] = 0.5 * tr_i * h.noise_variance;
    Ok((value, grad))
}

/// Sum over output dimensions of the Gaussian log evidence and its gradient
/// with respect to the log-hyperparameters (dimension-major layout).
pub fn log_marginal_likelihood(
    dataset: &GpDataset,
    hypers: &[KernelHyper],
) -> Result<(f64, Vec<f64>)> {
    if hypers.len() != dataset.output_dim() {
        return Err(Error::Dimension(format!(
            "{} hyperparameter sets for {} outputs",
            hypers.len(),
            dataset.output_dim()
        )));
    }
    let mut total = 0.0;
    let mut grad = Vec::new();
    for (d, h) in hypers.iter().enumerate() {
        h.validate(Some(dataset.input_dim()))?;
        let y = dataset.targets.column(d).into_owned();
        let (v, g) = log_evidence_dim(&dataset.inputs, &y, h)?;
        total += v;
        grad.extend(g.iter());
    }
    Ok((total, grad))
}

/// Outcome of evidence maximization.
#[derive(Clone, Debug)]
pub struct TrainedHypers {
    pub hypers: Vec<KernelHyper>,
    pub log_evidence: f64,
    pub initial_log_evidence: f64,
    /// Set when every restart of some output dimension failed to produce a
    /// finite improvement; the best finite iterate is returned anyway.
    pub diverged: bool,
}

/// Options for [`train_hyperparameters`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            restarts: 3,
            max_iterations: 150,
            gradient_tolerance: 1e-6,
        }
    }
}

fn lower_bounds(e: usize) -> Vec<f64> {
    let mut lb = vec![LENGTH_SCALE_FLOOR.ln(); e];
    lb.push(f64::NEG_INFINITY);
    lb.push(NOISE_FLOOR.ln());
    lb
}

fn project(p: &mut [f64], lb: &[f64]) {
    for (v, l) in p.iter_mut().zip(lb) {
        if *v < *l {
            *v = *l;
        }
    }
}

/// Projected BFGS descent on the negative log evidence of one dimension.
fn maximize_dim(
    inputs: &DMatrix<f64>,
    y: &DVector<f64>,
    start: &[f64],
    opts: &TrainOptions,
) -> Option<(Vec<f64>, f64)> {
    let lb = lower_bounds(inputs.ncols());
    let eval = |p: &[f64]| -> Option<(f64, DVector<f64>)> {
        let h = KernelHyper::from_log_params(p);
        if h.validate(None).is_err() {
            return None;
        }
        let (v, g) = log_evidence_dim(inputs, y, &h).ok()?;
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return None;
        }
        Some((-v, -g))
    };
    let mut x = start.to_vec();
    project(&mut x, &lb);
    let (mut f, mut g) = eval(&x)?;
    let n = x.len();
    let mut hinv = DMatrix::<f64>::identity(n, n);
    for _ in 0..opts.max_iterations {
        // Zero the components pinned at a floor with an outward gradient.
        let free: Vec<bool> = (0..n).map(|i| !(x[i] <= lb[i] && g[i] > 0.0)).collect();
        let pg = DVector::from_iterator(n, (0..n).map(|i| if free[i] { g[i] } else { 0.0 }));
        if pg.amax() < opts.gradient_tolerance {
            break;
        }
        let mut dir = -(&hinv * &pg);
        for i in 0..n {
            if !free[i] {
                dir[i] = 0.0;
            }
        }
        if dir.dot(&pg) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = -pg.clone();
        }
        // Cap the step in log-space.
        let dn = dir.amax();
        if dn > 2.0 {
            dir *= 2.0 / dn;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut xn: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a + step * b).collect();
            project(&mut xn, &lb);
            let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
            if let Some((fnew, gnew)) = eval(&xn) {
                if fnew <= f + 1e-4 * g.dot(&s) {
                    accepted = Some((xn, fnew, gnew, s));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew, s)) = accepted else {
            break;
        };
        let yv = &gnew - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            // BFGS inverse update.
            hinv += (&s * s.transpose()) * (rho * (1.0 + rho * yhy))
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            hinv = symmetrize(&hinv);
        }
        let improvement = f - fnew;
        x = xn;
        f = fnew;
        g = gnew;
        if improvement.abs() < 1e-10 * (1.0 + f.abs()) {
            break;
        }
    }
    Some((x, -f))
}

/// Evidence maximization per output dimension with random restarts in
/// log-parameter space. The first restart starts from `init`; the result
/// never has lower evidence than `init`.
pub fn train_hyperparameters<R: Rng + ?Sized>(
    dataset: &GpDataset,
    init: &[KernelHyper],
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainedHypers> {
    if init.len() != dataset.output_dim() {
        return Err(Error::Dimension(format!(
            "{} initial hyperparameter sets for {} outputs",
            init.len(),
            dataset.output_dim()
        )));
    }
    let restarts = opts.restarts.max(1);
    let mut out = Vec::with_capacity(init.len());
    let mut total = 0.0;
    let mut initial_total = 0.0;
    let mut diverged = false;
    for (d, h0) in init.iter().enumerate() {
        h0.validate(Some(dataset.input_dim()))?;
        let y = dataset.targets.column(d).into_owned();
        let p0 = h0.to_log_params();
        let init_value = log_evidence_dim(&dataset.inputs, &y, h0)
            .map(|(v, _)| v)
            .unwrap_or(f64::NEG_INFINITY);
        initial_total += init_value;
        let mut best: (Vec<f64>, f64) = (p0.clone(), init_value);
        let mut any_finite = false;
        for r in 0..restarts {
            let start: Vec<f64> = if r == 0 {
                p0.clone()
            } else {
                p0.iter()
                    .map(|v| v + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            if let Some((p, v)) = maximize_dim(&dataset.inputs, &y, &start, opts) {
                if v.is_finite() {
                    any_finite = true;
                    if v > best.1 {
                        best = (p, v);
                    }
                }
            }
        }
        if !any_finite {
            warn!("all {restarts} restarts diverged for output {d}; keeping best finite iterate");
            diverged = true;
        }
        total += best.1;
        out.push(KernelHyper::from_log_params(&best.0));
    }
    Ok(TrainedHypers {
        hypers: out,
        log_evidence: total,
        initial_log_evidence: initial_total,
        diverged,
    })
}
