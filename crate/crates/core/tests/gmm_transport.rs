//! The mixture flow map carries the noised marginal back onto the clean mixture.

use cwgf_core::gmm_world::{GmmComponent, GmmPrior};
use cwgf_core::rng::{seeded_rng, standard_normal_vec};
use cwgf_core::schedule::VpSchedule;
use cwgf_core::world::PriorModel;
use cwgf_core::{Matrix, Vector};
use proptest::prelude::*;

const GRID: usize = 100;
const HALF_WIDTH: f64 = 20.0;
const SAMPLES: usize = 10_000;
const TV_TOL: f64 = 0.05;
// Empirical TV against exact cell masses has a floor near sqrt(cells / (2π N)),
// so components stay compact enough for the tolerance to measure transport error.
const SD_RANGE: core::ops::Range<f64> = 0.2..0.5;

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

/// Exact cell masses of a mixture with diagonal covariances on the grid.
fn cell_masses(comps: &[(f64, [f64; 2], [f64; 2])], c: &Vector) -> Vec<f64> {
    let h = 2.0 * HALF_WIDTH / GRID as f64;
    let edge = |i: usize| -HALF_WIDTH + i as f64 * h;
    let mut out = vec![0.0; GRID * GRID];
    for &(w, mean, sd) in comps {
        let axis = |k: usize| -> Vec<f64> {
            (0..GRID)
                .map(|i| {
                    let m = mean[k] + c[k];
                    normal_cdf((edge(i + 1) - m) / sd[k]) - normal_cdf((edge(i) - m) / sd[k])
                })
                .collect()
        };
        let (px, py) = (axis(0), axis(1));
        for i in 0..GRID {
            for j in 0..GRID {
                out[i * GRID + j] += w * px[i] * py[j];
            }
        }
    }
    out
}

fn histogram(points: &[Vector]) -> Vec<f64> {
    let h = 2.0 * HALF_WIDTH / GRID as f64;
    let mut out = vec![0.0; GRID * GRID];
    let bin = |x: f64| (((x + HALF_WIDTH) / h).floor() as i64).clamp(0, GRID as i64 - 1) as usize;
    for p in points {
        out[bin(p[0]) * GRID + bin(p[1])] += 1.0 / points.len() as f64;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn flow_map_preserves_mixture_marginal(
        offset in 1.0f64..4.0,
        sd_a in SD_RANGE,
        sd_b in SD_RANGE,
        w in 0.2f64..0.8,
        t in 0.05f64..1.0,
        shift in -1.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let sched = VpSchedule::default();
        let mixture = [
            (w, [-offset, 0.0], [sd_a, sd_b]),
            (1.0 - w, [offset, 0.5], [sd_b, sd_a]),
        ];
        let comps = mixture
            .iter()
            .map(|&(w, m, s)| {
                let cov = Matrix::from_diagonal(&Vector::from_row_slice(&[s[0] * s[0], s[1] * s[1]]));
                GmmComponent::new(w, Vector::from_row_slice(&m), &cov).unwrap()
            })
            .collect();
        let world = GmmPrior::new(comps, Matrix::identity(2, 2)).unwrap();
        let c = Vector::from_row_slice(&[shift, -shift]);
        let mut rng = seeded_rng(seed);
        let (sa, s) = (sched.alpha(t).unwrap().sqrt(), sched.sigma2(t).unwrap().sqrt());
        let mapped: Vec<Vector> = (0..SAMPLES)
            .map(|_| {
                let z0 = world.sample(&c, &mut rng).unwrap();
                let z_t = z0 * sa + standard_normal_vec(&mut rng, 2) * s;
                world.flow_map(&sched, t, &z_t, &c).unwrap()
            })
            .collect();
        let exact = cell_masses(&mixture, &c);
        let tv = 0.5 * histogram(&mapped).iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>();
        prop_assert!(tv < TV_TOL, "total variation {tv}");
    }
}
