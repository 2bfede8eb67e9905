//! Score-matching gradient flow on the prompt embedding with ball projection.

use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::schedule::{StepWeights, VpSchedule};
use crate::world::PriorModel;
use crate::Vector;

/// Default projection radius around the initial prompt.
pub const DEFAULT_RADIUS: f64 = 15.0;

/// Time weighting `λ(t)` of the prompt objective `λ(t)·N⁻¹Σ‖r − s‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PromptWeighting {
    /// `½β(t)σ_t²/α_t`.
    #[default]
    InverseSnr,
    /// `½w(t)` with the solver's step weights.
    StepWeight(StepWeights),
    /// `½β(t)`, under which the time integral recovers the KL gradient.
    HalfBeta,
    Constant(f64),
}

impl PromptWeighting {
    pub fn weight(&self, sched: &VpSchedule, t: f64) -> Result<f64> {
        Ok(match self {
            PromptWeighting::InverseSnr => 0.5 * sched.beta(t) * sched.inv_snr(t)?,
            PromptWeighting::StepWeight(w) => 0.5 * w.weight(sched, t),
            PromptWeighting::HalfBeta => 0.5 * sched.beta(t),
            PromptWeighting::Constant(v) => *v,
        })
    }
}

/// Per-particle gradient samples `−2λ(t)(∂s/∂c)ᵀ(r⁽ⁿ⁾ − s(z_t⁽ⁿ⁾))` with noise residual targets
/// `r⁽ⁿ⁾ = −(z_t⁽ⁿ⁾ − √α_t z⁽ⁿ⁾)/σ_t²`.
pub fn prompt_gradient_samples<W: PriorModel + ?Sized>(
    world: &W,
    particles: &[Vector],
    noisy: &[Vector],
    sched: &VpSchedule,
    t: f64,
    c: &Vector,
    weighting: PromptWeighting,
) -> Result<Vec<Vector>> {
    check_len("prompt_gradient", particles.len(), noisy.len())?;
    check_len("prompt_gradient", world.prompt_dim(), c.len())?;
    if particles.is_empty() {
        return Err(Error::config("prompt gradient needs at least one particle"));
    }
    let (a, s) = sched.alpha_sigma(t)?;
    if s == 0.0 {
        return Err(Error::domain("prompt gradient needs positive noise"));
    }
    let sa = libm::sqrt(a);
    let lam = weighting.weight(sched, t)?;
    particles
        .iter()
        .zip(noisy)
        .map(|(z, zt)| {
            let target = (zt - z * sa) / (-s * s);
            let resid = target - world.score(sched, t, zt, c)?;
            Ok(world.score_prompt_vjp(sched, t, zt, c, &resid)? * (-2.0 * lam))
        })
        .collect()
}

/// Monte Carlo prompt gradient at a single time.
pub fn prompt_gradient<W: PriorModel + ?Sized>(
    world: &W,
    particles: &[Vector],
    noisy: &[Vector],
    sched: &VpSchedule,
    t: f64,
    c: &Vector,
    weighting: PromptWeighting,
) -> Result<Vector> {
    let samples = prompt_gradient_samples(world, particles, noisy, sched, t, c, weighting)?;
    let mut g = Vector::zeros(c.len());
    for s in &samples {
        g += s;
    }
    Ok(g / samples.len() as f64)
}

/// Time-integrated prompt gradient `Σ_j q_j ∇̂_c(t_j)` over quadrature nodes `(t_j, q_j)`.
///
/// `noise_for` supplies the noised particles at each node.
pub fn prompt_gradient_integral<W: PriorModel + ?Sized>(
    world: &W,
    particles: &[Vector],
    sched: &VpSchedule,
    nodes: &[(f64, f64)],
    c: &Vector,
    weighting: PromptWeighting,
    mut noise_for: impl FnMut(f64) -> Result<Vec<Vector>>,
) -> Result<Vector> {
    let mut g = Vector::zeros(c.len());
    for &(t, q) in nodes {
        let noisy = noise_for(t)?;
        g += prompt_gradient(world, particles, &noisy, sched, t, c, weighting)? * q;
    }
    Ok(g)
}

/// Prompt embedding with its anchor, projection radius and step size.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    pub c: Vector,
    pub c0: Vector,
    pub radius: f64,
    pub eta: f64,
}

impl PromptState {
    /// Start at `c0`. A zero step size freezes the prompt.
    pub fn new(c0: Vector, radius: f64, eta: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::config("prompt radius must be positive"));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::config("prompt step size must be non-negative"));
        }
        if c0.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("initial prompt has non-finite entries"));
        }
        Ok(PromptState {
            c: c0.clone(),
            c0,
            radius,
            eta,
        })
    }

    pub fn distance_from_anchor(&self) -> f64 {
        (&self.c - &self.c0).norm()
    }
}

/// Euclidean projection onto the ball `B(center, radius)`.
pub fn project_ball(c: &Vector, center: &Vector, radius: f64) -> Vector {
    let offset = c - center;
    let r = offset.norm();
    if r <= radius {
        c.clone()
    } else {
        center + offset * (radius / r)
    }
}

/// Gradient step followed by projection onto the anchor ball.
pub fn prompt_step(state: &PromptState, gradient: &Vector) -> Result<PromptState> {
    check_len("prompt_step", state.c.len(), gradient.len())?;
    if gradient.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("prompt gradient has non-finite entries"));
    }
    let stepped = &state.c - gradient * state.eta;
    Ok(PromptState {
        c: project_ball(&stepped, &state.c0, state.radius),
        ..state.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_world::{gaussian_kl, GaussianPrior};
    use crate::gmm_world::GmmPrior;
    use crate::linalg::random_spd;
    use crate::linear_ops::LinearForwardOp;
    use crate::oracles::{finite_diff_grad, mc_mean_vec};
    use crate::particles::{noise_particles, ParticleEnsemble};
    use crate::rng::{seeded_rng, standard_normal_vec, SolverRng};
    use crate::vae::{AffineDecoder, LatentLikelihood};
    use crate::world::ScaledScore;
    use crate::{Matrix, Vector};
    use alloc::vec;
    use proptest::prelude::*;

    fn cosine(a: &Vector, b: &Vector) -> f64 {
        a.dot(b) / (a.norm() * b.norm())
    }

    fn noise(ps: &[Vector], t: f64, rng: &mut SolverRng) -> Vec<Vector> {
        let ens = ParticleEnsemble::new(ps.to_vec()).unwrap();
        noise_particles(&ens, &VpSchedule::default(), t, rng).unwrap()
    }

    #[test]
    fn weighting_values() {
        let s = VpSchedule::default();
        let t = 0.4;
        let (a, sig) = s.alpha_sigma(t).unwrap();
        let inv = PromptWeighting::InverseSnr.weight(&s, t).unwrap();
        assert!((inv - 0.5 * s.beta(t) * sig * sig / a).abs() < 1e-12 * inv);
        assert_eq!(
            PromptWeighting::HalfBeta.weight(&s, t).unwrap(),
            0.5 * s.beta(t)
        );
        let sw = PromptWeighting::StepWeight(StepWeights::default())
            .weight(&s, t)
            .unwrap();
        assert!((sw - 0.5 * (0.1 + 0.8 * t)).abs() < 1e-15);
        assert_eq!(PromptWeighting::Constant(2.0).weight(&s, t).unwrap(), 2.0);
    }

    #[test]
    fn prompt_free_score_gives_zero_gradient() {
        let world = GaussianPrior::new(
            &Matrix::identity(2, 2),
            Matrix::zeros(2, 2),
            Vector::zeros(2),
        )
        .unwrap();
        let mut rng = seeded_rng(1);
        let ps: Vec<Vector> = (0..16).map(|_| standard_normal_vec(&mut rng, 2)).collect();
        let noisy = noise(&ps, 0.5, &mut rng);
        let g = prompt_gradient(
            &world,
            &ps,
            &noisy,
            &VpSchedule::default(),
            0.5,
            &Vector::zeros(2),
            PromptWeighting::default(),
        )
        .unwrap();
        assert_eq!(g, Vector::zeros(2));
    }

    #[test]
    fn single_sample_matches_finite_difference() {
        let mut rng = seeded_rng(2);
        let cov = random_spd(2, 0.4, 2.0, &mut rng).matrix();
        let b = Matrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]);
        let world = GaussianPrior::new(&cov, b, Vector::from_vec(vec![0.1, -0.2])).unwrap();
        let s = VpSchedule::default();
        let t = 0.3;
        let z = standard_normal_vec(&mut rng, 2);
        let zt = noise(core::slice::from_ref(&z), t, &mut rng);
        let c = Vector::from_vec(vec![0.4, -0.6]);
        let (a, sig) = s.alpha_sigma(t).unwrap();
        let lam = PromptWeighting::InverseSnr.weight(&s, t).unwrap();
        let loss = |c: &Vector| {
            let r = (&zt[0] - &z * libm::sqrt(a)) / (-sig * sig);
            lam * (r - world.score(&s, t, &zt[0], c).unwrap()).norm_squared()
        };
        let fd = finite_diff_grad(loss, &c, 1e-5).unwrap();
        let g = prompt_gradient(&world, &[z], &zt, &s, t, &c, PromptWeighting::InverseSnr).unwrap();
        assert!((g - &fd).amax() < 1e-6 * (1.0 + fd.amax()));
    }

    /// Invertible `B` world with its likelihood and marginal-likelihood maximiser.
    fn gaussian_setup(seed: u64) -> (GaussianPrior, LatentLikelihood, Vector, Vector) {
        let mut rng = seeded_rng(seed);
        let cov = random_spd(2, 0.5, 1.5, &mut rng).matrix();
        let b = Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 0.9]);
        let world = GaussianPrior::new(&cov, b, Vector::zeros(2)).unwrap();
        let dec = AffineDecoder::new(Matrix::identity(2, 2), Vector::zeros(2), 0.3).unwrap();
        let lik = LatentLikelihood::new(&dec, &LinearForwardOp::identity(2), 0.2).unwrap();
        let y = Vector::from_vec(vec![1.2, -0.7]);
        let c_star = world.mmle(&lik, &y).unwrap();
        (world, lik, y, c_star)
    }

    #[test]
    fn gradient_vanishes_at_marginal_likelihood_maximiser() {
        let (world, lik, y, c_star) = gaussian_setup(3);
        let post = world.latent_posterior(&c_star, &lik, &y).unwrap();
        let s = VpSchedule::default();
        let mut rng = seeded_rng(4);
        let ps: Vec<Vector> = (0..20_000)
            .map(|_| post.sample(&mut rng).unwrap())
            .collect();
        let t = 0.3;
        let noisy = noise(&ps, t, &mut rng);
        let samples = prompt_gradient_samples(
            &world,
            &ps,
            &noisy,
            &s,
            t,
            &c_star,
            PromptWeighting::InverseSnr,
        )
        .unwrap();
        for est in mc_mean_vec(&samples) {
            assert!(est.z_score(0.0) < 3.0, "{est:?}");
        }
    }

    #[test]
    fn integrated_gradient_aligns_with_kl_gradient() {
        let (world, lik, y, c_star) = gaussian_setup(5);
        let post = world.latent_posterior(&c_star, &lik, &y).unwrap();
        let c = &c_star + Vector::from_vec(vec![0.8, -0.5]);
        let s = VpSchedule::default();
        let mut rng = seeded_rng(6);
        let ps: Vec<Vector> = (0..10_000)
            .map(|_| post.sample(&mut rng).unwrap())
            .collect();
        let n = 40;
        let h = (1.0 - 1e-3) / n as f64;
        let nodes: Vec<(f64, f64)> = (0..n).map(|j| (1e-3 + (j as f64 + 0.5) * h, h)).collect();
        let g = prompt_gradient_integral(
            &world,
            &ps,
            &s,
            &nodes,
            &c,
            PromptWeighting::HalfBeta,
            |t| Ok(noise(&ps, t, &mut rng)),
        )
        .unwrap();
        let kl = |c: &Vector| gaussian_kl(&post, &world.law(c).unwrap()).unwrap();
        let exact = finite_diff_grad(kl, &c, 1e-5).unwrap();
        assert!(cosine(&g, &exact) > 0.95, "cos {}", cosine(&g, &exact));
    }

    #[test]
    fn rescaled_score_preserves_gradient_direction() {
        let world = GmmPrior::bimodal(2.0, 0.3).unwrap();
        let s = VpSchedule::default();
        let c = Vector::from_vec(vec![0.3, -0.2]);
        let mut rng = seeded_rng(7);
        let ps: Vec<Vector> = (0..4000)
            .map(|_| standard_normal_vec(&mut rng, 2) * 0.5 + Vector::from_vec(vec![2.0, 0.0]))
            .collect();
        for &t in &[0.1, 0.3, 0.6] {
            let noisy = noise(&ps, t, &mut rng);
            let exact =
                prompt_gradient(&world, &ps, &noisy, &s, t, &c, PromptWeighting::InverseSnr)
                    .unwrap();
            for &scale in &[0.9, 1.1] {
                let scaled = ScaledScore {
                    inner: world.clone(),
                    scale,
                };
                let g =
                    prompt_gradient(&scaled, &ps, &noisy, &s, t, &c, PromptWeighting::InverseSnr)
                        .unwrap();
                assert!(
                    cosine(&g, &exact) > 0.99,
                    "t {t} scale {scale}: {}",
                    cosine(&g, &exact)
                );
            }
        }
    }

    #[test]
    fn repeated_steps_approach_maximiser_on_average() {
        let (world, lik, y, c_star) = gaussian_setup(8);
        let post = world.latent_posterior(&c_star, &lik, &y).unwrap();
        let s = VpSchedule::default();
        let steps = 8;
        let mut avg = vec![0.0; steps + 1];
        for seed in 0..20 {
            let mut rng = seeded_rng(100 + seed);
            let ps: Vec<Vector> = (0..256).map(|_| post.sample(&mut rng).unwrap()).collect();
            let mut state = PromptState::new(
                &c_star + Vector::from_vec(vec![1.5, 1.0]),
                DEFAULT_RADIUS,
                0.1,
            )
            .unwrap();
            avg[0] += (&state.c - &c_star).norm();
            for k in 0..steps {
                let t = 0.139 + 0.1 * (k % 4) as f64;
                let noisy = noise(&ps, t, &mut rng);
                let g = prompt_gradient(
                    &world,
                    &ps,
                    &noisy,
                    &s,
                    t,
                    &state.c,
                    PromptWeighting::InverseSnr,
                )
                .unwrap();
                state = prompt_step(&state, &g).unwrap();
                avg[k + 1] += (&state.c - &c_star).norm();
            }
        }
        for k in 0..steps {
            assert!(avg[k + 1] < avg[k], "{avg:?}");
        }
    }

    #[test]
    fn step_and_projection() {
        let state = PromptState::new(Vector::from_vec(vec![1.0, 1.0]), 2.0, 0.5).unwrap();
        assert_eq!(prompt_step(&state, &Vector::zeros(2)).unwrap(), state);
        let far = prompt_step(&state, &Vector::from_vec(vec![-100.0, 20.0])).unwrap();
        assert!((far.distance_from_anchor() - 2.0).abs() < 1e-12);
        assert!(prompt_step(&state, &Vector::from_vec(vec![f64::NAN, 0.0])).is_err());
        assert!(PromptState::new(Vector::zeros(1), 0.0, 0.1).is_err());
        assert!(PromptState::new(Vector::zeros(1), 1.0, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_inside(seed in 0u64..1000, radius in 0.01f64..20.0) {
            let mut rng = seeded_rng(seed);
            let c = standard_normal_vec(&mut rng, 3) * 10.0;
            let center = standard_normal_vec(&mut rng, 3);
            let once = project_ball(&c, &center, radius);
            let twice = project_ball(&once, &center, radius);
            prop_assert!((&once - &twice).amax() < 1e-12);
            prop_assert!((&once - &center).norm() <= radius * (1.0 + 1e-12));
        }
    }
}
