//! Gaussian-mixture latent world with exact noised scores and an RK4 flow map.
//!
//! Component means shift with the prompt as `μ_k + Bc`. Convolving a mixture
//! with the forward kernel gives the mixture of `N(√α_t (μ_k + Bc), α_t Σ_k + σ_t² I)`.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::linalg::SpdEigen;
use crate::oracles::{log_sum_exp, rk4_step};
use crate::rng::{standard_normal_vec, SolverRng};
use crate::schedule::VpSchedule;
use crate::world::PriorModel;
use crate::{Matrix, Vector};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Default number of RK4 steps of the flow map.
pub const DEFAULT_FLOW_STEPS: usize = 200;

/// One weighted Gaussian component.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vector,
    eig: SpdEigen,
}

impl GmmComponent {
    pub fn new(weight: f64, mean: Vector, cov: &Matrix) -> Result<Self> {
        let eig = SpdEigen::new(cov)?;
        check_len("GmmComponent", eig.dim(), mean.len())?;
        if !(weight >= 0.0) {
            return Err(Error::config("mixture weights must be non-negative"));
        }
        Ok(GmmComponent { weight, mean, eig })
    }

    pub fn cov(&self) -> Matrix {
        self.eig.matrix()
    }
}

/// Per-component quantities of the noised mixture at one point.
struct Noised {
    log_resp: Vec<f64>,
    /// `u_k = V_k⁻¹ (z − √α (μ_k + Bc))`.
    u: Vec<Vector>,
}

/// Prompt-shifted Gaussian mixture prior.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    components: Vec<GmmComponent>,
    b: Matrix,
    flow_steps: usize,
}

impl GmmPrior {
    pub fn new(components: Vec<GmmComponent>, b: Matrix) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::config("mixture needs at least one component"))?;
        let d = first.mean.len();
        for c in &components {
            check_len("GmmPrior", d, c.mean.len())?;
        }
        check_len("GmmPrior", d, b.nrows())?;
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(alloc::format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(GmmPrior {
            components,
            b,
            flow_steps: DEFAULT_FLOW_STEPS,
        })
    }

    /// Two equally weighted isotropic components at `(±offset, 0)` with standard deviation `std`.
    /// The prompt shifts both means.
    pub fn bimodal(offset: f64, std: f64) -> Result<Self> {
        let cov = Matrix::identity(2, 2) * (std * std);
        let comps = alloc::vec![
            GmmComponent::new(0.5, Vector::from_vec(alloc::vec![-offset, 0.0]), &cov)?,
            GmmComponent::new(0.5, Vector::from_vec(alloc::vec![offset, 0.0]), &cov)?,
        ];
        Self::new(comps, Matrix::identity(2, 2))
    }

    pub fn with_flow_steps(mut self, steps: usize) -> Self {
        self.flow_steps = steps.max(1);
        self
    }

    pub fn flow_steps(&self) -> usize {
        self.flow_steps
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    fn shifted_mean(&self, k: usize, c: &Vector) -> Vector {
        &self.components[k].mean + &self.b * c
    }

    fn noised(&self, sched: &VpSchedule, t: f64, z: &Vector, c: &Vector) -> Result<Noised> {
        check_len("GmmPrior", self.b.nrows(), z.len())?;
        check_len("GmmPrior", self.b.ncols(), c.len())?;
        let a = sched.alpha(t)?;
        let s2 = sched.sigma2(t)?;
        let sa = libm::sqrt(a);
        let d = z.len() as f64;
        let mut log_resp = Vec::with_capacity(self.components.len());
        let mut u = Vec::with_capacity(self.components.len());
        for (k, comp) in self.components.iter().enumerate() {
            let r = z - self.shifted_mean(k, c) * sa;
            let uk = comp.eig.apply_fn(&r, |l| 1.0 / (a * l + s2));
            let log_det: f64 = comp.eig.values.iter().map(|&l| libm::log(a * l + s2)).sum();
            let log_w = if comp.weight > 0.0 {
                libm::log(comp.weight)
            } else {
                f64::NEG_INFINITY
            };
            log_resp.push(log_w - 0.5 * (d * LN_2PI + log_det + r.dot(&uk)));
            u.push(uk);
        }
        Ok(Noised { log_resp, u })
    }

    /// Log density of the noised mixture at time `t`.
    pub fn log_density(&self, sched: &VpSchedule, t: f64, z: &Vector, c: &Vector) -> Result<f64> {
        Ok(log_sum_exp(&self.noised(sched, t, z, c)?.log_resp))
    }

    /// Posterior component probabilities of the noised mixture.
    pub fn responsibilities(
        &self,
        sched: &VpSchedule,
        t: f64,
        z: &Vector,
        c: &Vector,
    ) -> Result<Vec<f64>> {
        let n = self.noised(sched, t, z, c)?;
        Ok(normalise_logs(&n.log_resp))
    }

    /// Most probable clean component of `z`.
    pub fn component_label(&self, z: &Vector, c: &Vector) -> Result<usize> {
        let r = self.responsibilities(&VpSchedule::default(), 0.0, z, c)?;
        Ok(r.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                if v > best.1 {
                    (k, v)
                } else {
                    best
                }
            })
            .0)
    }

    /// Exact score of the noised mixture with log-sum-exp responsibilities.
    pub fn gmm_score(&self, sched: &VpSchedule, t: f64, z: &Vector, c: &Vector) -> Result<Vector> {
        let n = self.noised(sched, t, z, c)?;
        let r = normalise_logs(&n.log_resp);
        let mut s = Vector::zeros(z.len());
        for (rk, uk) in r.iter().zip(n.u.iter()) {
            s.axpy(-rk, uk, 1.0);
        }
        Ok(s)
    }

    /// RK4 integration of `dz/ds = −(β_s/2)(z + ∇log r_s(z))` from `s = t` down to 0.
    pub fn ode_flow_map(
        &self,
        sched: &VpSchedule,
        t: f64,
        z_t: &Vector,
        c: &Vector,
        steps: usize,
    ) -> Result<Vector> {
        if t == 0.0 {
            return Ok(z_t.clone());
        }
        sched.alpha(t)?;
        if steps == 0 {
            return Err(Error::domain("flow map needs at least one step"));
        }
        let drift = |s: f64, z: &Vector| -> Result<Vector> {
            Ok((z + self.gmm_score(sched, s.max(0.0), z, c)?) * (-0.5 * sched.beta(s)))
        };
        let h = -t / steps as f64;
        let mut z = z_t.clone();
        for i in 0..steps {
            let s = t + i as f64 * h;
            z = rk4_step(&drift, s, &z, h)?;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(alloc::format!(
                    "flow map diverged at step {i} (s = {s})"
                )));
            }
        }
        Ok(z)
    }
}

fn normalise_logs(logs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logs);
    logs.iter().map(|&l| libm::exp(l - lse)).collect()
}

impl PriorModel for GmmPrior {
    fn dim(&self) -> usize {
        self.b.nrows()
    }

    fn prompt_dim(&self) -> usize {
        self.b.ncols()
    }

    fn flow_map(&self, sched: &VpSchedule, t: f64, z_t: &Vector, c: &Vector) -> Result<Vector> {
        self.ode_flow_map(sched, t, z_t, c, self.flow_steps)
    }

    fn score(&self, sched: &VpSchedule, t: f64, z_t: &Vector, c: &Vector) -> Result<Vector> {
        self.gmm_score(sched, t, z_t, c)
    }

    /// `(∂s/∂c)ᵀ v = Σ_k r_k √α Bᵀ[V_k⁻¹ v − (vᵀu_k)(u_k − ū)]` with `ū = Σ_j r_j u_j`.
    fn score_prompt_vjp(
        &self,
        sched: &VpSchedule,
        t: f64,
        z_t: &Vector,
        c: &Vector,
        v: &Vector,
    ) -> Result<Vector> {
        check_len("score_prompt_vjp", z_t.len(), v.len())?;
        let n = self.noised(sched, t, z_t, c)?;
        let r = normalise_logs(&n.log_resp);
        let a = sched.alpha(t)?;
        let s2 = sched.sigma2(t)?;
        let mut ubar = Vector::zeros(z_t.len());
        for (rk, uk) in r.iter().zip(n.u.iter()) {
            ubar.axpy(*rk, uk, 1.0);
        }
        let mut acc = Vector::zeros(z_t.len());
        for (k, comp) in self.components.iter().enumerate() {
            if r[k] == 0.0 {
                continue;
            }
            let vinv = comp.eig.apply_fn(v, |l| 1.0 / (a * l + s2));
            let term = vinv - (&n.u[k] - &ubar) * v.dot(&n.u[k]);
            acc.axpy(r[k], &term, 1.0);
        }
        Ok(self.b.tr_mul(&acc) * libm::sqrt(a))
    }

    fn sample(&self, c: &Vector, rng: &mut SolverRng) -> Result<Vector> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, comp) in self.components.iter().enumerate() {
            acc += comp.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let e = standard_normal_vec(rng, self.dim());
        Ok(self.shifted_mean(pick, c) + self.components[pick].eig.apply_fn(&e, libm::sqrt))
    }
}
