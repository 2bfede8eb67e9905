//! Particle ensemble and the two particle subflows: the kernelised prior step
//! and the encoder-based likelihood step.

use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::linalg::dist_sq;
use crate::linear_ops::{pixel_posterior_mean, LinearForwardOp};
use crate::oracles::log_sum_exp;
use crate::rng::{standard_normal_vec, SolverRng};
use crate::schedule::VpSchedule;
use crate::vae::LinearGaussianVae;
use crate::{Matrix, Vector};

/// `N` latent particles representing an empirical measure.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    particles: Vec<Vector>,
}

impl ParticleEnsemble {
    /// Non-empty set of finite particles of equal dimension.
    pub fn new(particles: Vec<Vector>) -> Result<Self> {
        let first = particles
            .first()
            .ok_or_else(|| Error::config("ensemble needs at least one particle"))?;
        let d = first.len();
        for p in &particles {
            check_len("ParticleEnsemble", d, p.len())?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("particle has non-finite entries"));
            }
        }
        Ok(ParticleEnsemble { particles })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn particles(&self) -> &[Vector] {
        &self.particles
    }

    pub fn into_particles(self) -> Vec<Vector> {
        self.particles
    }

    pub fn mean(&self) -> Vector {
        let mut m = Vector::zeros(self.dim());
        for p in &self.particles {
            m += p;
        }
        m / self.len() as f64
    }

    /// Particles as rows of an `N × d` matrix.
    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_fn(self.len(), self.dim(), |i, j| self.particles[i][j])
    }
}

/// Forward-noised copies `√α_t z + σ_t ε` with fresh noise for every particle.
pub fn noise_particles(
    ens: &ParticleEnsemble,
    sched: &VpSchedule,
    t: f64,
    rng: &mut SolverRng,
) -> Result<Vec<Vector>> {
    let (a, s) = sched.alpha_sigma(t)?;
    let sa = libm::sqrt(a);
    Ok(ens
        .particles()
        .iter()
        .map(|z| z * sa + standard_normal_vec(rng, z.len()) * s)
        .collect())
}

/// Row-stochastic interaction matrix `π`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    pub pi: Matrix,
}

impl InteractionMatrix {
    pub fn min_diagonal(&self) -> f64 {
        self.pi.diagonal().min()
    }

    pub fn mean_diagonal(&self) -> f64 {
        self.pi.diagonal().mean()
    }

    /// Local barycentres `Σ_m π_nm z_m`.
    pub fn barycentres(&self, ens: &ParticleEnsemble) -> Result<Vec<Vector>> {
        check_len("InteractionMatrix::barycentres", self.pi.ncols(), ens.len())?;
        Ok((0..self.pi.nrows())
            .map(|n| {
                let mut acc = Vector::zeros(ens.dim());
                for (m, z) in ens.particles().iter().enumerate() {
                    acc.axpy(self.pi[(n, m)], z, 1.0);
                }
                acc
            })
            .collect())
    }
}

/// `π_nm ∝ exp(−‖z_tⁿ − √α_t zᵐ‖²/(2σ_t²))`, normalised per row with log-sum-exp.
pub fn kernel_weights(
    ens: &ParticleEnsemble,
    noisy: &[Vector],
    sched: &VpSchedule,
    t: f64,
) -> Result<InteractionMatrix> {
    check_len("kernel_weights", ens.len(), noisy.len())?;
    let (a, s) = sched.alpha_sigma(t)?;
    if s == 0.0 {
        return Err(Error::domain("kernel weights need positive noise"));
    }
    let sa = libm::sqrt(a);
    let scaled: Vec<Vector> = ens.particles().iter().map(|z| z * sa).collect();
    let n = ens.len();
    let mut pi = Matrix::zeros(n, n);
    let mut logs = Vec::with_capacity(n);
    for (row, zt) in noisy.iter().enumerate() {
        logs.clear();
        logs.extend(scaled.iter().map(|m| -dist_sq(zt, m) / (2.0 * s * s)));
        let lse = log_sum_exp(&logs);
        for (col, &l) in logs.iter().enumerate() {
            pi[(row, col)] = libm::exp(l - lse);
        }
    }
    Ok(InteractionMatrix { pi })
}

/// Prior step `z̄ⁿ = zⁿ + η(gⁿ − zⁿ) + η(zⁿ − Σ_m π_nm zᵐ)`.
pub fn prior_step(
    ens: &ParticleEnsemble,
    pi: &InteractionMatrix,
    flow_outputs: &[Vector],
    eta_r: f64,
) -> Result<Vec<Vector>> {
    check_len("prior_step", ens.len(), flow_outputs.len())?;
    let bary = pi.barycentres(ens)?;
    ens.particles()
        .iter()
        .zip(flow_outputs.iter().zip(bary.iter()))
        .map(|(z, (g, m))| {
            check_len("prior_step", z.len(), g.len())?;
            Ok(z + (g - z) * eta_r + (z - m) * eta_r)
        })
        .collect()
}

/// Likelihood step `z ← z̄ + η_L λ⁻¹ Σ_φ ĝ(z̄)` with the pixel posterior mean and encoder drift.
pub fn likelihood_step(
    points: &[Vector],
    vae: &LinearGaussianVae,
    op: &LinearForwardOp,
    y: &Vector,
    sigma_y: f64,
    eta_l: f64,
) -> Result<Vec<Vector>> {
    points
        .iter()
        .map(|z| {
            let decoded = vae.decoder.decode(z)?;
            let m = pixel_posterior_mean(op, &decoded, y, vae.decoder.sigma_dec, sigma_y)?;
            Ok(z + vae.preconditioned_drift(z, &m)? * eta_l)
        })
        .collect()
}
