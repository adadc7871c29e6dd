//! Small dense linear-algebra helpers shared by the GP, propagation and
//! planning code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance below which a negative covariance eigenvalue is treated as
/// round-off and clipped.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// Cholesky factor with the jitter that was needed to obtain it.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub lower: DMatrix<f64>,
    pub jitter: f64,
}

/// Factorize a symmetric matrix, escalating diagonal jitter from 0 to
/// `1e-10 * trace / n` and then by factors of ten up to `1e-4 * trace / n`.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<JitteredCholesky> {
    let n = a.nrows();
    if let Some(chol) = a.clone().cholesky() {
        return Ok(JitteredCholesky {
            lower: chol.unpack(),
            jitter: 0.0,
        });
    }
    let scale = (a.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = 1e-10;
    while rel <= 1e-4 * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut aj = a.clone();
        for i in 0..n {
            aj[(i, i)] += jitter;
        }
        if let Some(chol) = aj.cholesky() {
            return Ok(JitteredCholesky {
                lower: chol.unpack(),
                jitter,
            });
        }
        rel *= 10.0;
    }
    Err(Error::IllConditioned { jitter: 1e-4 * scale })
}

/// Solve `L Lᵀ x = b` for a lower-triangular factor `L`.
pub fn chol_solve(lower: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = lower
        .solve_lower_triangular(b)
        .expect("cholesky factor has a positive diagonal");
    lower
        .tr_solve_lower_triangular(&y)
        .expect("cholesky factor has a positive diagonal")
}

/// Inverse of `L Lᵀ`.
pub fn chol_inverse(lower: &DMatrix<f64>) -> DMatrix<f64> {
    let n = lower.nrows();
    let linv = lower
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("cholesky factor has a positive diagonal");
    let inv = linv.tr_mul(&linv);
    symmetrize(&inv)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn is_finite_matrix(a: &DMatrix<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Symmetrize and clip slightly negative eigenvalues to zero. Eigenvalues
/// below `-PSD_TOLERANCE` (relative to the matrix scale) are an error.
pub fn psd_repair(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_finite_matrix(a) {
        return Err(Error::NonFinite("covariance".into()));
    }
    let s = symmetrize(a);
    if s.nrows() == 0 {
        return Ok(s);
    }
    // Cheap path: a successful Cholesky proves positive definiteness.
    if s.clone().cholesky().is_some() {
        return Ok(s);
    }
    let eig = s.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(s);
    }
    let scale = s.diagonal().amax().max(1.0);
    if min < -PSD_TOLERANCE * scale {
        return Err(Error::NotPsd(min));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    Ok(symmetrize(&rebuilt))
}

/// Number of upper-triangular entries of a `d × d` symmetric matrix.
pub fn vech_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Row-major upper-triangular index pairs `(i, j)` with `i ≤ j`.
pub fn vech_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(vech_len(d));
    for i in 0..d {
        for j in i..d {
            out.push((i, j));
        }
    }
    out
}

/// Position of `(i, j)` in the row-major upper-triangular layout.
pub fn vech_index(d: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * d - i * i.saturating_sub(1) / 2 + (j - i)
}

pub fn vech(a: &DMatrix<f64>) -> DVector<f64> {
    let d = a.nrows();
    DVector::from_iterator(vech_len(d), vech_pairs(d).into_iter().map(|(i, j)| a[(i, j)]))
}

pub fn unvech(v: &[f64], d: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(d, d);
    for (k, (i, j)) in vech_pairs(d).into_iter().enumerate() {
        a[(i, j)] = v[k];
        a[(j, i)] = v[k];
    }
    a
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vech_index_matches_pairs() {
        for d in 1..6 {
            for (k, (i, j)) in vech_pairs(d).into_iter().enumerate() {
                assert_eq!(vech_index(d, i, j), k);
                assert_eq!(vech_index(d, j, i), k);
            }
        }
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        let a = DMatrix::from_element(3, 3, 1.0);
        let c = cholesky_with_jitter(&a).unwrap();
        assert!(c.jitter > 0.0);
        assert!(c.jitter <= 1e-4 * 1.0 + 1e-15);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky_with_jitter(&a),
            Err(Error::IllConditioned { .. })
        ));
    }

    #[test]
    fn psd_repair_clips_roundoff_and_rejects_large_violations() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-12]);
        let r = psd_repair(&a).unwrap();
        assert!(r.symmetric_eigen().eigenvalues.min() >= -1e-15);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(psd_repair(&bad).is_err());
    }

    #[test]
    fn normal_quantile_95() {
        assert!((normal_quantile(0.95) - 1.644_853_626_951_472_2).abs() < 1e-9);
        assert_eq!(normal_quantile(0.5), 0.0);
    }
}
