//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, Dyn};
use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::rng::standard_normal_vec;
use crate::{Matrix, Vector};

/// Eigendecomposition `m = U diag(values) Uᵀ` of a symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdEigen {
    pub values: Vector,
    pub vectors: Matrix,
}

impl SpdEigen {
    /// Decompose `m`, rejecting non-square, asymmetric or non-positive-definite input.
    pub fn new(m: &Matrix) -> Result<Self> {
        check_square("SpdEigen::new", m)?;
        let scale = m.amax().max(1.0);
        if (m - m.transpose()).amax() > 1e-10 * scale {
            return Err(Error::domain("matrix is not symmetric"));
        }
        let eig = symmetrize(m).symmetric_eigen();
        if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::domain("matrix is not positive definite"));
        }
        Ok(SpdEigen {
            values: eig.eigenvalues,
            vectors: eig.eigenvectors,
        })
    }

    /// Build from a known spectrum and orthonormal basis.
    pub fn from_parts(values: Vector, vectors: Matrix) -> Result<Self> {
        check_square("SpdEigen::from_parts", &vectors)?;
        check_len("SpdEigen::from_parts", vectors.nrows(), values.len())?;
        if values.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::domain("eigenvalues must be positive"));
        }
        let gram = vectors.transpose() * &vectors;
        if (gram - Matrix::identity(values.len(), values.len())).amax() > 1e-10 {
            return Err(Error::domain("eigenvector basis is not orthonormal"));
        }
        Ok(SpdEigen { values, vectors })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `U diag(f(λ)) Uᵀ x`.
    pub fn apply_fn(&self, x: &Vector, f: impl Fn(f64) -> f64) -> Vector {
        let mut coeffs = self.vectors.tr_mul(x);
        for (c, &l) in coeffs.iter_mut().zip(self.values.iter()) {
            *c *= f(l);
        }
        &self.vectors * coeffs
    }

    /// `U diag(f(λ)) Uᵀ`.
    pub fn matrix_fn(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let diag = Vector::from_iterator(self.dim(), self.values.iter().map(|&l| f(l)));
        let scaled = &self.vectors * Matrix::from_diagonal(&diag);
        symmetrize(&(scaled * self.vectors.transpose()))
    }

    pub fn matrix(&self) -> Matrix {
        self.matrix_fn(|l| l)
    }

    pub fn log_det(&self) -> f64 {
        self.values.iter().map(|&l| libm::log(l)).sum()
    }
}

pub fn check_square(context: &'static str, m: &Matrix) -> Result<()> {
    check_len(context, m.nrows(), m.ncols())
}

/// `(m + mᵀ)/2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Cholesky factor of an SPD matrix.
pub fn cholesky(m: &Matrix) -> Result<Cholesky<f64, Dyn>> {
    check_square("cholesky", m)?;
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::numeric("matrix is not positive definite"))
}

/// Inverse of an SPD matrix.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    Ok(symmetrize(&cholesky(m)?.inverse()))
}

/// `log det m` for SPD `m`.
pub fn spd_log_det(m: &Matrix) -> Result<f64> {
    let l = cholesky(m)?;
    Ok(2.0
        * l.l_dirty()
            .diagonal()
            .iter()
            .map(|&v| libm::log(v))
            .sum::<f64>())
}

/// Haar-like random orthogonal matrix: QR of a Gaussian matrix with sign correction.
pub fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Matrix {
    let g = Matrix::from_columns(
        &(0..dim)
            .map(|_| standard_normal_vec(rng, dim))
            .collect::<alloc::vec::Vec<_>>(),
    );
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col.neg_mut();
        }
    }
    q
}

/// Random SPD matrix with eigenvalues drawn uniformly from `[lo, hi]`.
pub fn random_spd<R: Rng + ?Sized>(dim: usize, lo: f64, hi: f64, rng: &mut R) -> SpdEigen {
    let u = random_orthogonal(dim, rng);
    let values = Vector::from_fn(dim, |_, _| lo + (hi - lo) * rng.random::<f64>());
    SpdEigen { values, vectors: u }
}

/// Squared Euclidean distance.
pub fn dist_sq(a: &Vector, b: &Vector) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn orthogonal_is_orthonormal() {
        let q = random_orthogonal(5, &mut seeded_rng(3));
        let err = (q.transpose() * &q - Matrix::identity(5, 5)).amax();
        assert!(err < 1e-12);
    }

    #[test]
    fn spd_eigen_roundtrip() {
        let e = random_spd(4, 0.5, 3.0, &mut seeded_rng(9));
        let m = e.matrix();
        let again = SpdEigen::new(&m).unwrap();
        assert!((again.matrix() - &m).amax() < 1e-12);
        assert!((again.log_det() - spd_log_det(&m).unwrap()).abs() < 1e-12);
        let inv = spd_inverse(&m).unwrap();
        assert!((inv * &m - Matrix::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(SpdEigen::new(&m).is_err());
        assert!(cholesky(&m).is_err());
    }
}
