//! Variance-preserving noise schedule, timestep plans and time-dependent weights.
//!
//! The schedule is linear in the rate, `β(t) = β_min + (β_max − β_min) t`, so
//! `α_t = exp(−β_min t − (β_max − β_min) t²/2)` and `σ_t² = 1 − α_t`.
//! Discrete plan indices in `1..=999` map to flow time by `t = index/999 · T`.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Largest discrete timestep index; it maps to `t = T`.
pub const MAX_INDEX: u32 = 999;

/// Default plan base set, ordered from high to low noise.
pub const DEFAULT_BASE_SET: [u32; 8] = [999, 879, 759, 639, 499, 379, 259, 139];

/// Linear-rate variance-preserving schedule on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_max: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        VpSchedule {
            beta_min: 0.1,
            beta_max: 20.0,
            t_max: 1.0,
        }
    }
}

impl VpSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t_max: f64) -> Result<Self> {
        if !(beta_min >= 0.0 && beta_max >= beta_min && t_max > 0.0) {
            return Err(Error::config(alloc::format!(
                "schedule needs 0 <= beta_min <= beta_max and T > 0 (got {beta_min}, {beta_max}, {t_max})"
            )));
        }
        Ok(VpSchedule {
            beta_min,
            beta_max,
            t_max,
        })
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.t_max).contains(&t) {
            Ok(())
        } else {
            Err(Error::domain(alloc::format!(
                "time {t} outside [0, {}]",
                self.t_max
            )))
        }
    }

    fn check_positive_time(&self, t: f64) -> Result<()> {
        self.check_time(t)?;
        if t > 0.0 {
            Ok(())
        } else {
            Err(Error::domain("time must be strictly positive"))
        }
    }

    /// Rate `β(t)`.
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t
    }

    /// `∫₀ᵗ β(s) ds`.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// Signal level `α_t`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(libm::exp(-self.integrated_beta(t)))
    }

    /// `(α_t, σ_t)`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        let a = self.alpha(t)?;
        Ok((a, libm::sqrt(self.sigma2(t)?)))
    }

    /// `σ_t² = 1 − α_t`, evaluated without cancellation at small `t`.
    pub fn sigma2(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(-libm::expm1(-self.integrated_beta(t)))
    }

    /// `1 − √α_t`, evaluated without cancellation at small `t`.
    pub fn one_minus_sqrt_alpha(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(-libm::expm1(-0.5 * self.integrated_beta(t)))
    }

    /// Averaging density `γ_t(s) = √α_t/(1 − √α_t) · β_s/(2√α_s)` on `[0, t]`.
    ///
    /// Its integral over `[0, t]` is one because `∫₀ᵗ β_s/(2√α_s) ds = 1/√α_t − 1`.
    pub fn gamma_weight(&self, t: f64, s: f64) -> Result<f64> {
        self.check_positive_time(t)?;
        if !(0.0..=t).contains(&s) {
            return Err(Error::domain(alloc::format!(
                "s = {s} outside [0, t = {t}]"
            )));
        }
        let sqrt_at = libm::exp(-0.5 * self.integrated_beta(t));
        let sqrt_as = libm::exp(-0.5 * self.integrated_beta(s));
        Ok(sqrt_at / self.one_minus_sqrt_alpha(t)? * self.beta(s) / (2.0 * sqrt_as))
    }

    /// Closed form of `∫₀ᵗ β_s/(2√α_s) ds = 1/√α_t − 1`.
    pub fn gamma_unnormalised_integral(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(libm::expm1(0.5 * self.integrated_beta(t)))
    }

    /// Inverse signal-to-noise ratio `σ_t²/α_t`.
    pub fn inv_snr(&self, t: f64) -> Result<f64> {
        self.check_positive_time(t)?;
        Ok(libm::expm1(self.integrated_beta(t)))
    }

    /// Flow time of a discrete index.
    pub fn time_of_index(&self, index: u32) -> f64 {
        index as f64 / MAX_INDEX as f64 * self.t_max
    }
}

/// How a plan visits its base set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanMode {
    /// Traverse the base set for the first half, then cycle its four lowest-noise entries.
    Cyclic,
    /// Repeat each entry consecutively.
    Decreasing,
    /// I.i.d. uniform draws from the base set.
    Uniform,
}

impl core::str::FromStr for PlanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(PlanMode::Cyclic),
            "decreasing" => Ok(PlanMode::Decreasing),
            "uniform" => Ok(PlanMode::Uniform),
            _ => Err(Error::config(alloc::format!("unknown plan mode '{s}'"))),
        }
    }
}

impl core::fmt::Display for PlanMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            PlanMode::Cyclic => "cyclic",
            PlanMode::Decreasing => "decreasing",
            PlanMode::Uniform => "uniform",
        })
    }
}

/// Sequence of discrete timesteps visited by the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepPlan {
    pub mode: PlanMode,
    pub base_set: Vec<u32>,
    pub iterations: usize,
    pub seed: u64,
}

impl TimestepPlan {
    pub fn new(mode: PlanMode, base_set: Vec<u32>, iterations: usize, seed: u64) -> Self {
        TimestepPlan {
            mode,
            base_set,
            iterations,
            seed,
        }
    }

    /// Default cyclic plan over [`DEFAULT_BASE_SET`].
    pub fn cyclic_default(iterations: usize) -> Self {
        Self::new(PlanMode::Cyclic, DEFAULT_BASE_SET.to_vec(), iterations, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("plan needs at least one iteration"));
        }
        if self.base_set.is_empty() {
            return Err(Error::config("plan base set is empty"));
        }
        if self.base_set.iter().any(|&i| i == 0 || i > MAX_INDEX) {
            return Err(Error::config(alloc::format!(
                "plan indices must lie in 1..={MAX_INDEX}"
            )));
        }
        if self.base_set.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::config("plan base set must be sorted descending"));
        }
        Ok(())
    }

    /// Discrete index for each iteration.
    pub fn indices(&self) -> Result<Vec<u32>> {
        self.validate()?;
        let k = self.iterations;
        let set = &self.base_set;
        let out = match self.mode {
            PlanMode::Cyclic => {
                let head = k.div_ceil(2);
                let tail = &set[set.len().saturating_sub(4)..];
                (0..k)
                    .map(|i| {
                        if i < head {
                            set[i % set.len()]
                        } else {
                            tail[(i - head) % tail.len()]
                        }
                    })
                    .collect()
            }
            PlanMode::Decreasing => (0..k).map(|i| set[i * set.len() / k]).collect(),
            PlanMode::Uniform => {
                let mut rng = seeded_rng(self.seed);
                (0..k)
                    .map(|_| set[rng.random_range(0..set.len())])
                    .collect()
            }
        };
        Ok(out)
    }

    /// Flow time for each iteration.
    pub fn times(&self, sched: &VpSchedule) -> Result<Vec<f64>> {
        Ok(self
            .indices()?
            .into_iter()
            .map(|i| sched.time_of_index(i))
            .collect())
    }
}

/// Linear step weights `w(t) = w_floor + w_slope · t/T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepWeights {
    pub w_floor: f64,
    pub w_slope: f64,
}

impl Default for StepWeights {
    fn default() -> Self {
        StepWeights {
            w_floor: 0.1,
            w_slope: 0.8,
        }
    }
}

impl StepWeights {
    /// Constant weight `w`.
    pub fn constant(w: f64) -> Self {
        StepWeights {
            w_floor: w,
            w_slope: 0.0,
        }
    }

    pub fn weight(&self, sched: &VpSchedule, t: f64) -> f64 {
        self.w_floor + self.w_slope * t / sched.t_max
    }

    /// Check `w(t) ∈ (0, 1]` at every time in `times`.
    pub fn validate(&self, sched: &VpSchedule, times: &[f64]) -> Result<()> {
        for &t in times {
            let w = self.weight(sched, t);
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::config(alloc::format!(
                    "step weight {w} at t = {t} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}
