//! Common interface of the latent prior worlds used by the solver.

use crate::error::Result;
use crate::rng::SolverRng;
use crate::schedule::VpSchedule;
use crate::Vector;

/// Prompt-conditioned latent prior `p_c` with exact time-`t` scores and flow map.
///
/// The flow map plays the role of an ideal consistency model. The score is the
/// one entering the prompt objective.
pub trait PriorModel {
    /// Latent dimension.
    fn dim(&self) -> usize;

    /// Prompt dimension.
    fn prompt_dim(&self) -> usize;

    /// Endpoint at time 0 of the probability-flow characteristic through `z_t`.
    fn flow_map(&self, sched: &VpSchedule, t: f64, z_t: &Vector, c: &Vector) -> Result<Vector>;

    /// Score `∇ log p_{c,t}(z_t)` of the noised prior.
    fn score(&self, sched: &VpSchedule, t: f64, z_t: &Vector, c: &Vector) -> Result<Vector>;

    /// Vector-Jacobian product `(∂s/∂c)ᵀ v` of the score with respect to the prompt.
    fn score_prompt_vjp(
        &self,
        sched: &VpSchedule,
        t: f64,
        z_t: &Vector,
        c: &Vector,
        v: &Vector,
    ) -> Result<Vector>;

    /// Draw one latent from `p_c`.
    fn sample(&self, c: &Vector, rng: &mut SolverRng) -> Result<Vector>;

    /// `KL(N(fit) ‖ p_c)` for the Gaussian fit of `points`, when available in closed form.
    fn fit_divergence(&self, _points: &[Vector], _c: &Vector) -> Option<Result<f64>> {
        None
    }
}

/// Wrapper that multiplies the score of `inner` by a constant and leaves its flow map intact.
#[derive(Debug, Clone)]
pub struct ScaledScore<W> {
    pub inner: W,
    pub scale: f64,
}

impl<W: PriorModel> PriorModel for ScaledScore<W> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn prompt_dim(&self) -> usize {
        self.inner.prompt_dim()
    }

    fn flow_map(&self, sched: &VpSchedule, t: f64, z_t: &Vector, c: &Vector) -> Result<Vector> {
        self.inner.flow_map(sched, t, z_t, c)
    }

    fn score(&self, sched: &VpSchedule, t: f64, z_t: &Vector, c: &Vector) -> Result<Vector> {
        Ok(self.inner.score(sched, t, z_t, c)? * self.scale)
    }

    fn score_prompt_vjp(
        &self,
        sched: &VpSchedule,
        t: f64,
        z_t: &Vector,
        c: &Vector,
        v: &Vector,
    ) -> Result<Vector> {
        Ok(self.inner.score_prompt_vjp(sched, t, z_t, c, v)? * self.scale)
    }

    fn sample(&self, c: &Vector, rng: &mut SolverRng) -> Result<Vector> {
        self.inner.sample(c, rng)
    }
}
