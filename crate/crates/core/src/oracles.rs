//! Independent verification machinery: quadrature, finite differences, grid
//! posteriors and Monte Carlo estimators with standard errors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::schedule::VpSchedule;
use crate::world::PriorModel;
use crate::Vector;

/// Composite trapezoid rule with `nodes` equally spaced nodes on `[a, b]`.
pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, nodes: usize) -> f64 {
    assert!(nodes >= 2, "trapezoid needs two nodes");
    let h = (b - a) / (nodes - 1) as f64;
    let inner: f64 = (1..nodes - 1).map(|i| f(a + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(a) + f(b)))
}

/// Composite Simpson rule with an even number of `intervals` on `[a, b]`.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    assert!(
        intervals >= 2 && intervals.is_multiple_of(2),
        "simpson needs an even interval count"
    );
    let h = (b - a) / intervals as f64;
    let mut acc = f(a) + f(b);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Central-difference gradient with step `h`.
pub fn finite_diff_grad(f: impl Fn(&Vector) -> f64, x: &Vector, h: f64) -> Result<Vector> {
    if !(h > 0.0) {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    let mut g = Vector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::numeric(
                "non-finite function value in finite differences",
            ));
        }
        g[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    /// Number of standard errors separating the estimate from `value`.
    pub fn z_score(&self, value: f64) -> f64 {
        (self.mean - value).abs() / self.std_err
    }
}

pub fn mc_mean(samples: &[f64]) -> McEstimate {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    McEstimate {
        mean,
        std_err: libm::sqrt(var / n),
    }
}

/// Coordinate-wise Monte Carlo means of vector samples.
pub fn mc_mean_vec(samples: &[Vector]) -> Vec<McEstimate> {
    let d = samples.first().map_or(0, |s| s.len());
    (0..d)
        .map(|i| mc_mean(&samples.iter().map(|s| s[i]).collect::<Vec<_>>()))
        .collect()
}

/// Quadrature value with the change observed when the node count is roughly halved.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureResult {
    pub value: Vector,
    pub halving_delta: f64,
}

/// Minimum number of RK4 steps along a characteristic.
pub const MIN_CHARACTERISTIC_STEPS: usize = 1000;

/// Convex average `∫₀ᵗ γ_t(s) ∇log r_s(z_s) ds` along the probability-flow
/// characteristic through `z_t`, by the trapezoid rule on `nodes` nodes.
///
/// The characteristic is integrated backwards with classical RK4 using exact
/// scores, with at least [`MIN_CHARACTERISTIC_STEPS`] steps.
pub fn quadrature_convex_average<W: PriorModel + ?Sized>(
    world: &W,
    sched: &VpSchedule,
    t: f64,
    z_t: &Vector,
    c: &Vector,
    nodes: usize,
) -> Result<QuadratureResult> {
    let full = convex_average(world, sched, t, z_t, c, nodes)?;
    let half = convex_average(world, sched, t, z_t, c, nodes.div_ceil(2))?;
    let halving_delta = (&full - &half).norm();
    Ok(QuadratureResult {
        value: full,
        halving_delta,
    })
}

fn convex_average<W: PriorModel + ?Sized>(
    world: &W,
    sched: &VpSchedule,
    t: f64,
    z_t: &Vector,
    c: &Vector,
    nodes: usize,
) -> Result<Vector> {
    if nodes < 100 {
        return Err(Error::domain(
            "convex-average quadrature needs at least 100 nodes",
        ));
    }
    let intervals = nodes - 1;
    let sub = MIN_CHARACTERISTIC_STEPS.div_ceil(intervals).max(1);
    let h = t / intervals as f64;
    let drift = |s: f64, z: &Vector| -> Result<Vector> {
        Ok((z + world.score(sched, s, z, c)?) * (-0.5 * sched.beta(s)))
    };
    let mut z = z_t.clone();
    let mut acc = Vector::zeros(z_t.len());
    for i in (0..=intervals).rev() {
        let s = i as f64 * h;
        let weight = if i == 0 || i == intervals { 0.5 } else { 1.0 };
        acc += world.score(sched, s, &z, c)? * (weight * sched.gamma_weight(t, s)?);
        if i > 0 {
            let dh = -h / sub as f64;
            for j in 0..sub {
                let s0 = s + j as f64 * dh;
                z = rk4_step(&drift, s0, &z, dh)?;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(alloc::format!(
                    "characteristic diverged at s = {s}"
                )));
            }
        }
    }
    Ok(acc * h)
}

/// One classical Runge-Kutta step of `dz/ds = f(s, z)` with signed step `h`.
pub fn rk4_step(
    f: &impl Fn(f64, &Vector) -> Result<Vector>,
    s: f64,
    z: &Vector,
    h: f64,
) -> Result<Vector> {
    let k1 = f(s, z)?;
    let k2 = f(s + 0.5 * h, &(z + &k1 * (0.5 * h)))?;
    let k3 = f(s + 0.5 * h, &(z + &k2 * (0.5 * h)))?;
    let k4 = f(s + h, &(z + &k3 * h))?;
    Ok(z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Normalised density of a one- or two-dimensional posterior on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    /// Cell centres along each axis.
    pub axes: Vec<Vec<f64>>,
    /// Probability mass per cell, row-major over the axes.
    pub mass: Vec<f64>,
}

impl GridDensity {
    pub fn point(&self, k: usize) -> Vector {
        match self.axes.len() {
            1 => Vector::from_vec(vec![self.axes[0][k]]),
            _ => {
                let n1 = self.axes[1].len();
                Vector::from_vec(vec![self.axes[0][k / n1], self.axes[1][k % n1]])
            }
        }
    }

    pub fn mean(&self) -> Vector {
        let mut m = Vector::zeros(self.axes.len());
        for (k, &p) in self.mass.iter().enumerate() {
            m += self.point(k) * p;
        }
        m
    }

    /// Total variation distance to another density on the same grid.
    pub fn total_variation(&self, other: &GridDensity) -> f64 {
        0.5 * self
            .mass
            .iter()
            .zip(other.mass.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Brute-force posterior: evaluate `log_density` at cell centres and normalise.
pub fn grid_posterior(
    log_density: impl Fn(&Vector) -> f64,
    bounds: &[(f64, f64)],
    resolution: usize,
) -> Result<GridDensity> {
    if bounds.is_empty() || bounds.len() > 2 {
        return Err(Error::domain(
            "grid posteriors support one or two dimensions",
        ));
    }
    if resolution == 0 {
        return Err(Error::domain("grid resolution must be positive"));
    }
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|&(lo, hi)| {
            let h = (hi - lo) / resolution as f64;
            (0..resolution).map(|i| lo + (i as f64 + 0.5) * h).collect()
        })
        .collect();
    let cells = axes.iter().map(|a| a.len()).product();
    let mut grid = GridDensity {
        axes,
        mass: vec![0.0; cells],
    };
    let logs: Vec<f64> = (0..cells).map(|k| log_density(&grid.point(k))).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::numeric("grid log density is not finite"));
    }
    let total: f64 = logs.iter().map(|&l| libm::exp(l - top)).sum();
    for (m, &l) in grid.mass.iter_mut().zip(logs.iter()) {
        *m = libm::exp(l - top) / total;
    }
    Ok(grid)
}

/// Log-sum-exp of a slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let top = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return top;
    }
    top + libm::log(values.iter().map(|&v| libm::exp(v - top)).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_world::{Gaussian, GaussianPrior};
    use crate::linalg::random_spd;
    use crate::linear_ops::LinearForwardOp;
    use crate::rng::{seeded_rng, standard_normal_vec};
    use crate::vae::{AffineDecoder, LatentLikelihood};
    use crate::Matrix;

    #[test]
    fn quadrature_rules_on_polynomials() {
        assert!((trapezoid(|x| 2.0 * x + 1.0, 0.0, 2.0, 3) - 6.0).abs() < 1e-14);
        assert!((simpson(|x| x * x * x, 0.0, 2.0, 2) - 4.0).abs() < 1e-14);
    }

    #[test]
    fn finite_differences_on_quadratic() {
        let f = |x: &Vector| 3.0 * x[0] * x[0] + x[0] * x[1] - 2.0 * x[1];
        let x = Vector::from_vec(vec![0.4, -1.3]);
        let g = finite_diff_grad(f, &x, 1e-4).unwrap();
        assert!((g[0] - (6.0 * 0.4 - 1.3)).abs() < 1e-10);
        assert!((g[1] - (0.4 - 2.0)).abs() < 1e-10);
        assert!(finite_diff_grad(f, &x, 0.0).is_err());
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let f = |x: &Vector| libm::sin(x[0]) * libm::exp(x[0]);
        let x = Vector::from_vec(vec![0.3]);
        let exact = libm::exp(0.3) * (libm::sin(0.3) + libm::cos(0.3));
        let e1 = (finite_diff_grad(f, &x, 1e-2).unwrap()[0] - exact).abs();
        let e2 = (finite_diff_grad(f, &x, 5e-3).unwrap()[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn finite_differences_match_gaussian_score() {
        let mut rng = seeded_rng(1);
        let g = Gaussian::new(
            standard_normal_vec(&mut rng, 3),
            random_spd(3, 0.5, 2.0, &mut rng).matrix(),
        )
        .unwrap();
        let x = standard_normal_vec(&mut rng, 3);
        let fd = finite_diff_grad(|v: &Vector| g.log_pdf(v).unwrap(), &x, 1e-5).unwrap();
        assert!((fd - g.score(&x).unwrap()).norm() < 1e-6);
    }

    #[test]
    fn convex_average_whitened_case() {
        let p = GaussianPrior::centered(&Matrix::identity(2, 2)).unwrap();
        let z = Vector::from_vec(vec![0.7, -1.2]);
        let q =
            quadrature_convex_average(&p, &VpSchedule::default(), 0.5, &z, &Vector::zeros(0), 2000)
                .unwrap();
        assert!((&q.value + &z).amax() < 1e-6);
        assert!(q.halving_delta < 1e-5);
    }

    #[test]
    fn convex_average_node_doubling() {
        let mut rng = seeded_rng(2);
        let p = GaussianPrior::centered(&random_spd(3, 0.4, 2.5, &mut rng).matrix()).unwrap();
        let z = standard_normal_vec(&mut rng, 3);
        let s = VpSchedule::default();
        let c = Vector::zeros(0);
        let a = quadrature_convex_average(&p, &s, 0.5, &z, &c, 2000)
            .unwrap()
            .value;
        let b = quadrature_convex_average(&p, &s, 0.5, &z, &c, 3999)
            .unwrap()
            .value;
        assert!((a - b).norm() < 1e-6);
    }

    #[test]
    fn grid_posterior_gaussian_mean() {
        let p = GaussianPrior::new(
            &Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            Vector::zeros(2),
        )
        .unwrap();
        let dec = AffineDecoder::new(Matrix::identity(2, 2), Vector::zeros(2), 0.5).unwrap();
        let lik = LatentLikelihood::new(&dec, &LinearForwardOp::identity(2), 0.5).unwrap();
        let y = Vector::from_vec(vec![1.0, -0.5]);
        let c = Vector::from_vec(vec![0.2, 0.1]);
        let law = p.law(&c).unwrap();
        let grid = grid_posterior(
            |z| law.log_pdf(z).unwrap() + lik.log_likelihood(z, &y).unwrap(),
            &[(-6.0, 6.0), (-6.0, 6.0)],
            200,
        )
        .unwrap();
        assert!((grid.mass.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let exact = p.latent_posterior(&c, &lik, &y).unwrap();
        assert!((grid.mean() - exact.mean).amax() < 12.0 / 200.0);
        assert!(grid_posterior(|_| 0.0, &[(0.0, 1.0); 3], 10).is_err());
    }

    #[test]
    fn mc_estimate_standard_error() {
        let e = mc_mean(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.std_err - libm::sqrt(5.0 / 3.0 / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + libm::log(2.0))).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
