//! The full particle solver: per-iteration noising, prompt step, kernelised
//! prior step and preconditioned likelihood step, plus run diagnostics.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::gaussian_world::gaussian_fit;
use crate::linear_ops::LinearForwardOp;
use crate::particles::{
    kernel_weights, likelihood_step, noise_particles, prior_step, ParticleEnsemble,
};
use crate::prompt::{prompt_gradient, prompt_step, PromptState, PromptWeighting, DEFAULT_RADIUS};
use crate::rng::{derive_seed, seeded_rng, standard_normal_vec};
use crate::schedule::{StepWeights, TimestepPlan, VpSchedule};
use crate::vae::{LatentLikelihood, LinearGaussianVae};
use crate::world::PriorModel;
use crate::Vector;

const INIT_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

/// How the initial particles are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    /// Samples from the prior at the initial prompt.
    Prior,
    /// Standard normal latents.
    Standard,
    /// Explicit particles; their count overrides `particles`.
    Given(Vec<Vector>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub iterations: usize,
    pub particles: usize,
    pub eta_r: f64,
    /// Multiply the prior step by `√α_t/(1−√α_t)` instead of absorbing that factor into `eta_r`.
    pub scale_prior_step: bool,
    pub eta_l: f64,
    /// Zero disables prompt optimisation.
    pub eta_c: f64,
    pub sigma_y: f64,
    pub plan: TimestepPlan,
    pub weights: StepWeights,
    pub schedule: VpSchedule,
    pub weighting: PromptWeighting,
    pub radius: f64,
    pub init: InitMode,
    pub seed: u64,
    /// Keep the particle positions after every iteration.
    pub trace: bool,
}

impl SolverConfig {
    /// Defaults for `iterations` steps with `particles` particles and a cyclic plan.
    pub fn new(iterations: usize, particles: usize) -> Self {
        SolverConfig {
            iterations,
            particles,
            eta_r: 1.0,
            scale_prior_step: false,
            eta_l: 1.0,
            eta_c: 0.1,
            sigma_y: 0.01,
            plan: TimestepPlan::cyclic_default(iterations),
            weights: StepWeights::default(),
            schedule: VpSchedule::default(),
            weighting: PromptWeighting::default(),
            radius: DEFAULT_RADIUS,
            init: InitMode::Prior,
            seed: 0,
            trace: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        let n = match &self.init {
            InitMode::Given(ps) => ps.len(),
            _ => self.particles,
        };
        if n == 0 {
            return Err(Error::config("particles must be at least 1"));
        }
        for (name, v) in [("eta_r", self.eta_r), ("eta_l", self.eta_l)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(alloc::format!("{name} must be positive")));
            }
        }
        if !(self.eta_c >= 0.0 && self.eta_c.is_finite()) {
            return Err(Error::config("eta_c must be non-negative"));
        }
        if !(self.sigma_y > 0.0 && self.sigma_y.is_finite()) {
            return Err(Error::config("sigma_y must be positive"));
        }
        if self.plan.iterations != self.iterations {
            return Err(Error::config(alloc::format!(
                "plan has {} iterations, config has {}",
                self.plan.iterations,
                self.iterations
            )));
        }
        self.plan.validate()?;
        self.weights
            .validate(&self.schedule, &self.plan.times(&self.schedule)?)?;
        Ok(())
    }
}

/// Diagnostic value of the objective for one ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunctionalValue {
    pub value: f64,
    /// Whether the Gaussian fit needed a diagonal jitter.
    pub regularized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub index: u32,
    pub t: f64,
    pub prompt_grad_norm: f64,
    /// `‖y − A·D(z)‖` per particle after the iteration.
    pub data_fit: Vec<f64>,
    /// `None` with a single particle or without a closed-form prior divergence.
    pub functional: Option<FunctionalValue>,
    pub pi_min_diag: f64,
    pub pi_mean_diag: f64,
}

impl IterationRecord {
    pub fn mean_data_fit(&self) -> f64 {
        self.data_fit.iter().sum::<f64>() / self.data_fit.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub records: Vec<IterationRecord>,
    pub particles: Vec<Vector>,
    pub prompt: Vector,
    /// Prompt before the first and after every iteration.
    pub prompt_trace: Vec<Vector>,
    /// Particles before the first and after every iteration, when tracing.
    pub trajectory: Option<Vec<Vec<Vector>>>,
    /// Filled in by callers that can read a clock.
    pub wall_time: Option<f64>,
}

impl RunReport {
    pub fn mean(&self) -> Vector {
        let mut m = Vector::zeros(self.particles[0].len());
        for p in &self.particles {
            m += p;
        }
        m / self.particles.len() as f64
    }
}

/// `KL(N(fit) ‖ p_c) − N⁻¹ Σ log p(y | zⁿ)` when the world provides the divergence.
pub fn functional_surrogate<W: PriorModel + ?Sized>(
    world: &W,
    lik: &LatentLikelihood,
    y: &Vector,
    points: &[Vector],
    c: &Vector,
) -> Result<Option<FunctionalValue>> {
    if points.len() < 2 {
        return Ok(None);
    }
    let kl = match world.fit_divergence(points, c) {
        None => return Ok(None),
        Some(kl) => kl?,
    };
    let regularized = gaussian_fit(points)?.regularized;
    let mut ll = 0.0;
    for z in points {
        ll += lik.log_likelihood(z, y)?;
    }
    Ok(Some(FunctionalValue {
        value: kl - ll / points.len() as f64,
        regularized,
    }))
}

fn data_fit(
    points: &[Vector],
    vae: &LinearGaussianVae,
    op: &LinearForwardOp,
    y: &Vector,
) -> Result<Vec<f64>> {
    points
        .iter()
        .map(|z| Ok((y - op.apply(&vae.decoder.decode(z)?)?).norm()))
        .collect()
}

fn at(k: usize) -> impl Fn(Error) -> Error {
    move |e| Error::AtIteration {
        iteration: k,
        source: Box::new(e),
    }
}

/// Run `K` iterations of the particle solver from prompt `c0`.
pub fn run_cwgf<W: PriorModel + ?Sized>(
    config: &SolverConfig,
    y: &Vector,
    op: &LinearForwardOp,
    world: &W,
    vae: &LinearGaussianVae,
    c0: &Vector,
) -> Result<RunReport> {
    config.validate()?;
    check_len("run_cwgf latent", world.dim(), vae.latent_dim())?;
    check_len("run_cwgf pixels", op.input_len(), vae.decoder.pixel_dim())?;
    check_len("run_cwgf observation", op.output_len(), y.len())?;
    check_len("run_cwgf prompt", world.prompt_dim(), c0.len())?;
    let sched = &config.schedule;
    let indices = config.plan.indices()?;
    let times = config.plan.times(sched)?;

    let mut init_rng = seeded_rng(derive_seed(config.seed, INIT_STREAM));
    let init = match &config.init {
        InitMode::Given(ps) => ps.clone(),
        InitMode::Prior => (0..config.particles)
            .map(|_| world.sample(c0, &mut init_rng))
            .collect::<Result<Vec<_>>>()?,
        InitMode::Standard => (0..config.particles)
            .map(|_| standard_normal_vec(&mut init_rng, world.dim()))
            .collect(),
    };
    let mut ens = ParticleEnsemble::new(init)?;
    check_len("run_cwgf particles", world.dim(), ens.dim())?;
    let mut prompt = PromptState::new(c0.clone(), config.radius, config.eta_c)?;
    let lik = if ens.len() >= 2 && world.fit_divergence(ens.particles(), c0).is_some() {
        Some(LatentLikelihood::new(&vae.decoder, op, config.sigma_y)?)
    } else {
        None
    };

    let mut rng = seeded_rng(derive_seed(config.seed, NOISE_STREAM));
    let mut records = Vec::with_capacity(config.iterations);
    let mut prompt_trace = Vec::with_capacity(config.iterations + 1);
    prompt_trace.push(prompt.c.clone());
    let mut trajectory = config.trace.then(|| {
        let mut v = Vec::with_capacity(config.iterations + 1);
        v.push(ens.particles().to_vec());
        v
    });

    for (k, (&index, &t)) in indices.iter().zip(&times).enumerate() {
        let mut step = || -> Result<(ParticleEnsemble, PromptState, IterationRecord)> {
            let noisy = noise_particles(&ens, sched, t, &mut rng)?;
            let c_old = &prompt.c;
            let grad = prompt_gradient(
                world,
                ens.particles(),
                &noisy,
                sched,
                t,
                c_old,
                config.weighting,
            )?;
            let next_prompt = prompt_step(&prompt, &grad)?;
            let pi = kernel_weights(&ens, &noisy, sched, t)?;
            let g = noisy
                .iter()
                .map(|zt| world.flow_map(sched, t, zt, c_old))
                .collect::<Result<Vec<_>>>()?;
            let mut eta_r = config.eta_r * config.weights.weight(sched, t);
            if config.scale_prior_step {
                eta_r *= sched.alpha(t)?.sqrt() / sched.one_minus_sqrt_alpha(t)?;
            }
            let prior = prior_step(&ens, &pi, &g, eta_r)?;
            let next = likelihood_step(&prior, vae, op, y, config.sigma_y, config.eta_l)?;
            let next = ParticleEnsemble::new(next)?;
            let functional = match &lik {
                Some(lik) => functional_surrogate(world, lik, y, next.particles(), &next_prompt.c)?,
                None => None,
            };
            let record = IterationRecord {
                k,
                index,
                t,
                prompt_grad_norm: grad.norm(),
                data_fit: data_fit(next.particles(), vae, op, y)?,
                functional,
                pi_min_diag: pi.min_diagonal(),
                pi_mean_diag: pi.mean_diagonal(),
            };
            Ok((next, next_prompt, record))
        };
        let (next, next_prompt, record) = step().map_err(at(k))?;
        ens = next;
        prompt = next_prompt;
        prompt_trace.push(prompt.c.clone());
        if let Some(tr) = trajectory.as_mut() {
            tr.push(ens.particles().to_vec());
        }
        records.push(record);
    }

    Ok(RunReport {
        records,
        particles: ens.into_particles(),
        prompt: prompt.c,
        prompt_trace,
        trajectory,
        wall_time: None,
    })
}
