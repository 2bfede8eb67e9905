//! Linear-Gaussian VAE: affine decoder, closed-form optimal encoder and the
//! encoder-based likelihood drift.
//!
//! The VAE prior is the standard normal `p₀ = N(0, I)`, the decoder is
//! `p(x|z) = N(Wz + b, σ_dec² I)` and the encoder is `q(z|x) = N(E(x), Σ_φ)`
//! with an input-independent covariance.

use nalgebra::{Cholesky, Dyn};

use crate::error::{check_len, Error, Result};
use crate::linalg::{cholesky, spd_inverse, symmetrize};
use crate::linear_ops::LinearForwardOp;
use crate::{Matrix, Vector};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Affine decoder `D(z) = Wz + b` with isotropic noise `σ_dec`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDecoder {
    pub w: Matrix,
    pub b: Vector,
    pub sigma_dec: f64,
}

impl AffineDecoder {
    pub fn new(w: Matrix, b: Vector, sigma_dec: f64) -> Result<Self> {
        check_len("AffineDecoder::new", w.nrows(), b.len())?;
        if !(sigma_dec > 0.0) {
            return Err(Error::config("decoder noise must be positive"));
        }
        Ok(AffineDecoder { w, b, sigma_dec })
    }

    pub fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn pixel_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn decode(&self, z: &Vector) -> Result<Vector> {
        check_len("AffineDecoder::decode", self.latent_dim(), z.len())?;
        Ok(&self.w * z + &self.b)
    }

    /// `∇_z log p(x|z) = σ_dec⁻² Wᵀ(x − Wz − b)`.
    pub fn log_likelihood_grad(&self, z: &Vector, x: &Vector) -> Result<Vector> {
        let r = x - self.decode(z)?;
        Ok(self.w.tr_mul(&r) / (self.sigma_dec * self.sigma_dec))
    }
}

/// Exact latent likelihood `y | z ~ N(Gz + Ab, C)` with `G = AW` and
/// `C = σ_y² I + σ_dec² AAᵀ`, obtained by integrating out the pixels.
#[derive(Debug, Clone)]
pub struct LatentLikelihood {
    g: Matrix,
    offset: Vector,
    cov: Matrix,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl LatentLikelihood {
    pub fn new(decoder: &AffineDecoder, op: &LinearForwardOp, sigma_y: f64) -> Result<Self> {
        if !(sigma_y > 0.0) {
            return Err(Error::config("observation noise must be positive"));
        }
        check_len("LatentLikelihood::new", op.input_len(), decoder.pixel_dim())?;
        let a = op.to_dense()?;
        let g = &a * &decoder.w;
        let offset = &a * &decoder.b;
        let m = a.nrows();
        let sd2 = decoder.sigma_dec * decoder.sigma_dec;
        let cov =
            symmetrize(&(Matrix::identity(m, m) * (sigma_y * sigma_y) + &a * a.transpose() * sd2));
        let chol = cholesky(&cov)?;
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|&v| libm::log(v))
                .sum::<f64>();
        let log_norm = -0.5 * (m as f64 * LN_2PI + log_det);
        Ok(LatentLikelihood {
            g,
            offset,
            cov,
            chol,
            log_norm,
        })
    }

    /// Latent-to-observation matrix `G = AW`.
    pub fn g(&self) -> &Matrix {
        &self.g
    }

    /// Observation offset `Ab`.
    pub fn offset(&self) -> &Vector {
        &self.offset
    }

    /// Observation covariance `C`.
    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    /// `C⁻¹ v`.
    pub fn solve(&self, v: &Vector) -> Vector {
        self.chol.solve(v)
    }

    fn residual(&self, z: &Vector, y: &Vector) -> Result<Vector> {
        check_len("LatentLikelihood", self.g.ncols(), z.len())?;
        check_len("LatentLikelihood", self.g.nrows(), y.len())?;
        Ok(y - &self.g * z - &self.offset)
    }

    pub fn log_likelihood(&self, z: &Vector, y: &Vector) -> Result<f64> {
        let r = self.residual(z, y)?;
        Ok(self.log_norm - 0.5 * r.dot(&self.solve(&r)))
    }

    /// `∇_z log p(y|z) = Gᵀ C⁻¹ (y − Gz − Ab)`.
    pub fn grad(&self, z: &Vector, y: &Vector) -> Result<Vector> {
        let r = self.residual(z, y)?;
        Ok(self.g.tr_mul(&self.solve(&r)))
    }

    /// Precision contribution `Gᵀ C⁻¹ G`.
    pub fn information(&self) -> Matrix {
        let cg = self.chol.solve(&self.g);
        symmetrize(&self.g.tr_mul(&cg))
    }
}

/// VAE with affine decoder and Gaussian encoder of fixed covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianVae {
    pub decoder: AffineDecoder,
    /// KL weight `λ`.
    pub lambda: f64,
    enc_mat: Matrix,
    enc_offset: Vector,
    sigma_phi: Matrix,
    sigma_phi_inv: Matrix,
}

impl LinearGaussianVae {
    /// VAE with the closed-form optimal encoder
    /// `Σ_φ = (I + λ⁻¹σ_dec⁻² WᵀW)⁻¹`, `E(x) = Σ_φ λ⁻¹σ_dec⁻² Wᵀ(x − b)`.
    pub fn optimal(decoder: AffineDecoder, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::config("KL weight must be positive"));
        }
        let d = decoder.latent_dim();
        let k = 1.0 / (lambda * decoder.sigma_dec * decoder.sigma_dec);
        let precision = symmetrize(&(Matrix::identity(d, d) + decoder.w.tr_mul(&decoder.w) * k));
        let sigma_phi = spd_inverse(&precision)?;
        let enc_mat = &sigma_phi * decoder.w.transpose() * k;
        Ok(LinearGaussianVae {
            enc_offset: Vector::zeros(d),
            decoder,
            lambda,
            enc_mat,
            sigma_phi,
            sigma_phi_inv: precision,
        })
    }

    /// VAE with an arbitrary affine encoder `E(x) = enc_mat (x − b) + enc_offset`.
    pub fn with_encoder(
        decoder: AffineDecoder,
        lambda: f64,
        enc_mat: Matrix,
        enc_offset: Vector,
        sigma_phi: Matrix,
    ) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::config("KL weight must be positive"));
        }
        let d = decoder.latent_dim();
        check_len("LinearGaussianVae::with_encoder", d, enc_mat.nrows())?;
        check_len(
            "LinearGaussianVae::with_encoder",
            decoder.pixel_dim(),
            enc_mat.ncols(),
        )?;
        check_len("LinearGaussianVae::with_encoder", d, enc_offset.len())?;
        check_len("LinearGaussianVae::with_encoder", d, sigma_phi.nrows())?;
        let sigma_phi_inv = spd_inverse(&sigma_phi)?;
        Ok(LinearGaussianVae {
            decoder,
            lambda,
            enc_mat,
            enc_offset,
            sigma_phi: symmetrize(&sigma_phi),
            sigma_phi_inv,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.latent_dim()
    }

    pub fn sigma_phi(&self) -> &Matrix {
        &self.sigma_phi
    }

    pub fn sigma_phi_inv(&self) -> &Matrix {
        &self.sigma_phi_inv
    }

    pub fn encoder_matrix(&self) -> &Matrix {
        &self.enc_mat
    }

    pub fn encoder_offset(&self) -> &Vector {
        &self.enc_offset
    }

    /// Encoder mean `E(x)`.
    pub fn encode(&self, x: &Vector) -> Result<Vector> {
        check_len(
            "LinearGaussianVae::encode",
            self.decoder.pixel_dim(),
            x.len(),
        )?;
        Ok(&self.enc_mat * (x - &self.decoder.b) + &self.enc_offset)
    }

    /// `∇_z log q_φ(z|x) = −Σ_φ⁻¹(z − E(x))`.
    pub fn encoder_score(&self, z: &Vector, x: &Vector) -> Result<Vector> {
        Ok(-(&self.sigma_phi_inv * (z - self.encode(x)?)))
    }

    /// Score of the optimal encoder `q⋆(z|x) ∝ p₀(z) p(x|z)^{1/λ}`.
    pub fn optimal_encoder_score(&self, z: &Vector, x: &Vector) -> Result<Vector> {
        Ok(self.decoder.log_likelihood_grad(z, x)? / self.lambda - z)
    }

    /// Likelihood drift `ĝ = λΣ_φ⁻¹(E(m) − z) + λz` given the pixel posterior mean `m`.
    pub fn encoder_drift(&self, z: &Vector, m_pixel: &Vector) -> Result<Vector> {
        check_len(
            "LinearGaussianVae::encoder_drift",
            self.latent_dim(),
            z.len(),
        )?;
        let e = self.encode(m_pixel)?;
        Ok(&self.sigma_phi_inv * (e - z) * self.lambda + z * self.lambda)
    }

    /// Preconditioned drift `λ⁻¹ Σ_φ ĝ` used by the particle update.
    pub fn preconditioned_drift(&self, z: &Vector, m_pixel: &Vector) -> Result<Vector> {
        Ok(&self.sigma_phi * self.encoder_drift(z, m_pixel)? / self.lambda)
    }
}
