//! Fully analytic Gaussian latent world.
//!
//! The prior is `p_c = N(Bc + m₀, Σ)` with `Σ = U diag(λ) Uᵀ` stored in its
//! eigenbasis. Noised marginals are `N(√α_t (Bc + m₀), M_t)` with
//! `M_t = α_t Σ + σ_t² I`, and every time-dependent quantity is diagonal in `U`.

use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::linalg::{cholesky, spd_inverse, spd_log_det, symmetrize, SpdEigen};
use crate::rng::{standard_normal_vec, SolverRng};
use crate::schedule::VpSchedule;
use crate::vae::LatentLikelihood;
use crate::world::PriorModel;
use crate::{Matrix, Vector};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Multivariate normal distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector,
    pub cov: Matrix,
}

impl Gaussian {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        check_len("Gaussian::new", mean.len(), cov.nrows())?;
        cholesky(&cov)?;
        Ok(Gaussian {
            mean,
            cov: symmetrize(&cov),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> Result<Matrix> {
        spd_inverse(&self.cov)
    }

    pub fn log_pdf(&self, x: &Vector) -> Result<f64> {
        check_len("Gaussian::log_pdf", self.dim(), x.len())?;
        let l = cholesky(&self.cov)?;
        let r = x - &self.mean;
        let log_det = 2.0
            * l.l_dirty()
                .diagonal()
                .iter()
                .map(|&v| libm::log(v))
                .sum::<f64>();
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + log_det + r.dot(&l.solve(&r))))
    }

    /// `∇ log N(x) = −Σ⁻¹(x − m)`.
    pub fn score(&self, x: &Vector) -> Result<Vector> {
        check_len("Gaussian::score", self.dim(), x.len())?;
        Ok(-cholesky(&self.cov)?.solve(&(x - &self.mean)))
    }

    pub fn sample(&self, rng: &mut SolverRng) -> Result<Vector> {
        let l = cholesky(&self.cov)?;
        Ok(&self.mean + l.l() * standard_normal_vec(rng, self.dim()))
    }
}

/// Result of fitting a Gaussian to a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub gaussian: Gaussian,
    /// True when `1e-8 I` had to be added to make the covariance positive definite.
    pub regularized: bool,
}

/// Sample mean and Bessel-corrected covariance of at least two points.
pub fn gaussian_fit(points: &[Vector]) -> Result<GaussianFit> {
    let n = points.len();
    if n < 2 {
        return Err(Error::domain("a Gaussian fit needs at least two points"));
    }
    let d = points[0].len();
    let mut mean = Vector::zeros(d);
    for p in points {
        check_len("gaussian_fit", d, p.len())?;
        mean += p;
    }
    mean /= n as f64;
    let mut cov = Matrix::zeros(d, d);
    for p in points {
        let r = p - &mean;
        cov += &r * r.transpose();
    }
    cov /= (n - 1) as f64;
    let eig = symmetrize(&cov).symmetric_eigenvalues();
    if eig.min() > 1e-12 * eig.max().max(1e-300) {
        return Ok(GaussianFit {
            gaussian: Gaussian { mean, cov },
            regularized: false,
        });
    }
    let cov = cov + Matrix::identity(d, d) * 1e-8;
    Ok(GaussianFit {
        gaussian: Gaussian::new(mean, cov)?,
        regularized: true,
    })
}

/// `KL(p ‖ q)` between Gaussians.
pub fn gaussian_kl(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    check_len("gaussian_kl", p.dim(), q.dim())?;
    let lq = cholesky(&q.cov)?;
    let dm = &q.mean - &p.mean;
    let trace = lq.solve(&p.cov).trace();
    let maha = dm.dot(&lq.solve(&dm));
    Ok(0.5 * (trace + maha - p.dim() as f64 + spd_log_det(&q.cov)? - spd_log_det(&p.cov)?))
}

/// Fisher divergence `E_p ‖∇log p − ∇log q‖²` between Gaussians.
pub fn gaussian_fisher_divergence(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    check_len("gaussian_fisher_divergence", p.dim(), q.dim())?;
    let p1 = p.precision()?;
    let p2 = q.precision()?;
    let diff = &p2 - &p1;
    let spread = (&diff * &p.cov * &diff).trace();
    let shift = &p2 * (&p.mean - &q.mean);
    Ok(spread + shift.norm_squared())
}

/// Squared 2-Wasserstein distance between Gaussians.
pub fn wasserstein2_sq(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    check_len("wasserstein2_sq", p.dim(), q.dim())?;
    let root_q = SpdEigen::new(&q.cov)?.matrix_fn(libm::sqrt);
    let inner = symmetrize(&(&root_q * &p.cov * &root_q));
    let cross = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&v| libm::sqrt(v.max(0.0)))
        .sum::<f64>();
    let value = (&p.mean - &q.mean).norm_squared() + p.cov.trace() + q.cov.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Normalised consistency-model score `s̄_t = (√α_t g − z_t)/(1 − √α_t)`.
///
/// Evaluated as `√α_t (g − z_t)/(1 − √α_t) − z_t`, which avoids cancellation at small `t`.
pub fn cm_surrogate_score(sched: &VpSchedule, t: f64, z_t: &Vector, g: &Vector) -> Result<Vector> {
    check_len("cm_surrogate_score", z_t.len(), g.len())?;
    if t == 0.0 {
        return Err(Error::domain("surrogate score undefined at t = 0"));
    }
    let delta = sched.one_minus_sqrt_alpha(t)?;
    let sqrt_a = libm::sqrt(sched.alpha(t)?);
    Ok((g - z_t) * (sqrt_a / delta) - z_t)
}

/// Per-direction term of the surrogate error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionError {
    pub lambda: f64,
    /// `a_{t,i}` with `(e_t)_i = a_{t,i} (z_t)_i`.
    pub coefficient: f64,
    /// `E[(e_t)_i²]` under `z_t ~ N(0, M_t)`.
    pub mse: f64,
}

/// Closed-form error of the surrogate score against the clean score at the flow-map endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateErrorReport {
    pub per_direction: Vec<DirectionError>,
    pub total_mse: f64,
    pub relative_mse: f64,
}

/// Numerator `1 + √α(λ−1) − √λ √m` of the surrogate coefficient, rearranged to
/// `(λ−1) δ (x/(1+r) − δ)/(1+r)` with `δ = 1 − √α`, `x = σ²(λ−1)/λ`, `r = √(1−x)`.
fn surrogate_numerator(lambda: f64, delta: f64, sigma2: f64) -> f64 {
    let x = sigma2 * (lambda - 1.0) / lambda;
    let r = libm::sqrt(1.0 - x);
    (lambda - 1.0) * delta * (x / (1.0 + r) - delta) / (1.0 + r)
}

/// Closed-form surrogate error for a prior with spectrum `lambdas`.
pub fn surrogate_error_for_spectrum(
    sched: &VpSchedule,
    t: f64,
    lambdas: &[f64],
) -> Result<SurrogateErrorReport> {
    if t == 0.0 {
        return Err(Error::domain("surrogate error undefined at t = 0"));
    }
    let alpha = sched.alpha(t)?;
    let delta = sched.one_minus_sqrt_alpha(t)?;
    let sigma2 = sched.sigma2(t)?;
    let mut per_direction = Vec::with_capacity(lambdas.len());
    let (mut total, mut clean) = (0.0, 0.0);
    for &lambda in lambdas {
        if !(lambda > 0.0) {
            return Err(Error::domain("spectrum must be positive"));
        }
        let num = surrogate_numerator(lambda, delta, sigma2);
        let m = 1.0 + alpha * (lambda - 1.0);
        let coefficient = num / (libm::sqrt(lambda) * delta * libm::sqrt(m));
        let mse = num * num / (lambda * delta * delta);
        total += mse;
        clean += 1.0 / lambda;
        per_direction.push(DirectionError {
            lambda,
            coefficient,
            mse,
        });
    }
    Ok(SurrogateErrorReport {
        per_direction,
        total_mse: total,
        relative_mse: total / clean,
    })
}

/// Small-time coefficient `Σ_i (λ_i − 1)²/(16 λ_i³)` of the surrogate error in units of `σ_t⁴`.
pub fn small_time_coefficient(lambdas: &[f64]) -> f64 {
    lambdas
        .iter()
        .map(|&l| (l - 1.0) * (l - 1.0) / (16.0 * l * l * l))
        .sum()
}

/// Gaussian prior `N(Bc + m₀, Σ)` with an affine prompt-dependent mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    eig: SpdEigen,
    b: Matrix,
    m0: Vector,
}

impl GaussianPrior {
    pub fn new(cov: &Matrix, b: Matrix, m0: Vector) -> Result<Self> {
        Self::from_eigen(SpdEigen::new(cov)?, b, m0)
    }

    pub fn from_eigen(eig: SpdEigen, b: Matrix, m0: Vector) -> Result<Self> {
        check_len("GaussianPrior", eig.dim(), b.nrows())?;
        check_len("GaussianPrior", eig.dim(), m0.len())?;
        Ok(GaussianPrior { eig, b, m0 })
    }

    /// Prior with no prompt dependence.
    pub fn centered(cov: &Matrix) -> Result<Self> {
        let d = cov.nrows();
        Self::new(cov, Matrix::zeros(d, 0), Vector::zeros(d))
    }

    pub fn eigen(&self) -> &SpdEigen {
        &self.eig
    }

    pub fn cov(&self) -> Matrix {
        self.eig.matrix()
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn m0(&self) -> &Vector {
        &self.m0
    }

    /// Prior mean `Bc + m₀`.
    pub fn mean(&self, c: &Vector) -> Result<Vector> {
        check_len("GaussianPrior::mean", self.b.ncols(), c.len())?;
        Ok(&self.b * c + &self.m0)
    }

    /// The prior `p_c` itself.
    pub fn law(&self, c: &Vector) -> Result<Gaussian> {
        Ok(Gaussian {
            mean: self.mean(c)?,
            cov: self.cov(),
        })
    }

    /// Noised marginal `N(√α_t m, M_t)`.
    pub fn marginal(&self, sched: &VpSchedule, t: f64, c: &Vector) -> Result<Gaussian> {
        let a = sched.alpha(t)?;
        let s2 = sched.sigma2(t)?;
        Ok(Gaussian {
            mean: self.mean(c)? * libm::sqrt(a),
            cov: self.eig.matrix_fn(|l| a * l + s2),
        })
    }

    fn check_state(&self, z: &Vector) -> Result<()> {
        check_len("GaussianPrior", self.eig.dim(), z.len())
    }

    /// Exact flow map `Σ^{1/2} M_t^{-1/2} (z_t − √α_t m) + m`.
    pub fn exact_flow_map(
        &self,
        sched: &VpSchedule,
        t: f64,
        z_t: &Vector,
        c: &Vector,
    ) -> Result<Vector> {
        self.check_state(z_t)?;
        let a = sched.alpha(t)?;
        let s2 = sched.sigma2(t)?;
        let m = self.mean(c)?;
        let centred = z_t - &m * libm::sqrt(a);
        // gain √(λ/m_t) − 1 written to vanish exactly when λ = 1
        let shift = self.eig.apply_fn(&centred, |l| {
            let mt = 1.0 + a * (l - 1.0);
            let ratio = s2 * (l - 1.0) / mt;
            ratio / (libm::sqrt(l / mt) + 1.0)
        });
        Ok(centred + shift + m)
    }

    /// Exact score `−M_t⁻¹ (z_t − √α_t m)`.
    pub fn exact_score(
        &self,
        sched: &VpSchedule,
        t: f64,
        z_t: &Vector,
        c: &Vector,
    ) -> Result<Vector> {
        self.check_state(z_t)?;
        let a = sched.alpha(t)?;
        let centred = z_t - self.mean(c)? * libm::sqrt(a);
        Ok(-self.eig.apply_fn(&centred, |l| 1.0 / (1.0 + a * (l - 1.0))))
    }

    /// Closed-form surrogate error report at time `t`.
    pub fn surrogate_error(&self, sched: &VpSchedule, t: f64) -> Result<SurrogateErrorReport> {
        surrogate_error_for_spectrum(sched, t, self.eig.values.as_slice())
    }

    /// Exact latent posterior `p_c(z | y)` under the latent likelihood `lik`.
    pub fn latent_posterior(
        &self,
        c: &Vector,
        lik: &LatentLikelihood,
        y: &Vector,
    ) -> Result<Gaussian> {
        check_len("latent_posterior", self.eig.dim(), lik.g().ncols())?;
        let prior_prec = self.eig.matrix_fn(|l| 1.0 / l);
        let precision = symmetrize(&(&prior_prec + lik.information()));
        let info = &prior_prec * self.mean(c)? + lik.g().tr_mul(&lik.solve(&(y - lik.offset())));
        let chol =
            cholesky(&precision).map_err(|_| Error::numeric("posterior precision is singular"))?;
        let mean = chol.solve(&info);
        Gaussian::new(mean, symmetrize(&chol.inverse()))
    }

    /// Marginal covariance `K = C + GΣGᵀ` of the observation.
    fn evidence_cov(&self, lik: &LatentLikelihood) -> Matrix {
        let g = lik.g();
        symmetrize(&(lik.cov() + g * self.cov() * g.transpose()))
    }

    /// `log p_c(y)`.
    pub fn log_evidence(&self, c: &Vector, lik: &LatentLikelihood, y: &Vector) -> Result<f64> {
        let mean = lik.g() * self.mean(c)? + lik.offset();
        Gaussian::new(mean, self.evidence_cov(lik))?.log_pdf(y)
    }

    /// Maximum marginal likelihood prompt `argmax_c log p_c(y)` (weighted least squares).
    pub fn mmle(&self, lik: &LatentLikelihood, y: &Vector) -> Result<Vector> {
        let q = self.b.ncols();
        if q == 0 {
            return Err(Error::config("prior has no prompt dimensions"));
        }
        let sv = self.b.clone().svd(false, false).singular_values;
        let smax = sv.max();
        if q > self.b.nrows() || sv.min() <= 1e-10 * smax.max(1e-300) {
            return Err(Error::config("prompt map B must have full column rank"));
        }
        let k = cholesky(&self.evidence_cov(lik))?;
        let h = lik.g() * &self.b;
        let target = y - lik.offset() - lik.g() * &self.m0;
        let normal = symmetrize(&h.tr_mul(&k.solve(&h)));
        let rhs = h.tr_mul(&k.solve(&target));
        cholesky(&normal)
            .map_err(|_| Error::numeric("prompt is not identifiable from the observation"))
            .map(|l| l.solve(&rhs))
    }
}

impl PriorModel for GaussianPrior {
    fn dim(&self) -> usize {
        self.eig.dim()
    }

    fn prompt_dim(&self) -> usize {
        self.b.ncols()
    }

    fn flow_map(&self, sched: &VpSchedule, t: f64, z_t: &Vector, c: &Vector) -> Result<Vector> {
        self.exact_flow_map(sched, t, z_t, c)
    }

    fn score(&self, sched: &VpSchedule, t: f64, z_t: &Vector, c: &Vector) -> Result<Vector> {
        self.exact_score(sched, t, z_t, c)
    }

    fn score_prompt_vjp(
        &self,
        sched: &VpSchedule,
        t: f64,
        z_t: &Vector,
        c: &Vector,
        v: &Vector,
    ) -> Result<Vector> {
        self.check_state(z_t)?;
        self.check_state(v)?;
        check_len("score_prompt_vjp", self.prompt_dim(), c.len())?;
        let a = sched.alpha(t)?;
        let mv = self.eig.apply_fn(v, |l| 1.0 / (1.0 + a * (l - 1.0)));
        Ok(self.b.tr_mul(&mv) * libm::sqrt(a))
    }

    fn sample(&self, c: &Vector, rng: &mut SolverRng) -> Result<Vector> {
        let e = standard_normal_vec(rng, self.dim());
        Ok(self.mean(c)? + self.eig.apply_fn(&e, libm::sqrt))
    }

    fn fit_divergence(&self, points: &[Vector], c: &Vector) -> Option<Result<f64>> {
        if points.len() < 2 {
            return None;
        }
        Some(gaussian_fit(points).and_then(|fit| gaussian_kl(&fit.gaussian, &self.law(c)?)))
    }
}
