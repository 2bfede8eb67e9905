//! Experiment construction, solver invocation and file outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cwgf_core::gaussian_world::GaussianPrior;
use cwgf_core::gmm_world::GmmPrior;
use cwgf_core::linalg::random_spd;
use cwgf_core::linear_ops::{binomial_kernel, random_walk_kernel, LinearForwardOp};
use cwgf_core::rng::{derive_seed, seeded_rng, standard_normal_vec};
use cwgf_core::solver::{run_cwgf, RunReport, SolverConfig};
use cwgf_core::vae::{AffineDecoder, LatentLikelihood, LinearGaussianVae};
use cwgf_core::world::PriorModel;
use cwgf_core::{Matrix, Vector};
use rand::Rng;

use crate::config::{
    value_label, ExperimentConfig, ExperimentKind, GaussianSection, GmmMode, OperatorName,
    RawConfig,
};
use crate::error::CliError;
use crate::io::{
    fmt_f64, tile_images, write_csv, write_pgm, write_report_csv, write_summary,
    write_trajectory_csv, write_vectors_csv,
};
use crate::metrics::metrics;

/// Stream reserved for building the synthetic problem, disjoint from the solver's streams.
const PROBLEM_STREAM: u64 = 1 << 32;
/// Base stream of the independent single-particle runs.
const INDEPENDENT_STREAM: u64 = 1 << 33;
/// Maximum number of particle images in the tiled output.
const MAX_TILES: usize = 8;

/// Command-line overrides of a config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub trace: bool,
    pub sweep: Option<(String, Vec<toml::Value>)>,
    /// Worker threads for sweeps and batched runs.
    pub threads: usize,
}

pub type Summary = Vec<(String, String)>;

fn entry(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

/// Map `f` over `items` on up to `threads` scoped workers, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(usize, &T) -> R + Sync,
) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Run the experiment described by `raw` into `out_dir`.
pub fn run(raw: &RawConfig, out_dir: &Path, opts: &RunOptions) -> Result<Summary, CliError> {
    let cfg = raw.typed()?;
    let seed = opts.seed.unwrap_or(cfg.experiment.seed);
    let trace = opts.trace || cfg.experiment.trace;
    std::fs::create_dir_all(out_dir)?;
    let sweep = match (&opts.sweep, cfg.experiment.kind, &cfg.ablation) {
        (Some(s), _, _) => Some((raw.clone(), s.clone())),
        (None, ExperimentKind::Ablation, Some(a)) => {
            let base = raw.with_override(
                "experiment.kind",
                &toml::Value::String(kind_name(a.base).into()),
            )?;
            Some((base, (a.key.clone(), a.values.clone())))
        }
        (None, ExperimentKind::Ablation, None) => {
            return Err(CliError::Config(
                "kind = \"ablation\" needs an [ablation] section".into(),
            ))
        }
        (None, _, _) => None,
    };
    match sweep {
        Some((base, (key, values))) => {
            run_sweep(&base, &key, &values, seed, trace, out_dir, opts.threads)
        }
        None => run_single(&cfg, seed, seed, trace, out_dir, opts.threads),
    }
}

fn kind_name(k: ExperimentKind) -> &'static str {
    match k {
        ExperimentKind::Gaussian => "gaussian",
        ExperimentKind::GmmInpaint => "gmm_inpaint",
        ExperimentKind::Ablation => "ablation",
    }
}

/// `problem_seed` fixes the synthetic data, `seed` the solver streams.
fn run_single(
    cfg: &ExperimentConfig,
    problem_seed: u64,
    seed: u64,
    trace: bool,
    out: &Path,
    threads: usize,
) -> Result<Summary, CliError> {
    let start = Instant::now();
    let mut summary = match cfg.experiment.kind {
        ExperimentKind::Gaussian => run_gaussian(cfg, problem_seed, seed, trace, out)?,
        ExperimentKind::GmmInpaint => run_gmm(cfg, seed, trace, out, threads)?,
        ExperimentKind::Ablation => {
            return Err(CliError::Config(
                "ablation base must be gaussian or gmm_inpaint".into(),
            ))
        }
    };
    write_summary(&out.join("summary.txt"), &summary)?;
    // wall time stays out of the files so reruns are byte-identical
    summary.push(entry(
        "wall_time_s",
        format!("{:.3}", start.elapsed().as_secs_f64()),
    ));
    Ok(summary)
}

fn run_sweep(
    base: &RawConfig,
    key: &str,
    values: &[toml::Value],
    seed: u64,
    trace: bool,
    out: &Path,
    threads: usize,
) -> Result<Summary, CliError> {
    let field = key.rsplit('.').next().unwrap_or(key);
    let jobs: Vec<(PathBuf, RawConfig)> = values
        .iter()
        .map(|v| {
            Ok((
                out.join(format!("{field}_{}", value_label(v))),
                base.with_override(key, v)?,
            ))
        })
        .collect::<Result<_, CliError>>()?;
    let results = parallel_map(&jobs, threads, |i, (dir, raw)| {
        std::fs::create_dir_all(dir)?;
        let cfg = raw.typed()?;
        if cfg.experiment.kind == ExperimentKind::Ablation {
            return Err(CliError::Config("sweeps cannot nest".into()));
        }
        // same problem for every value, independent solver streams; nested runs stay single-threaded
        run_single(&cfg, seed, derive_seed(seed, i as u64 + 1), trace, dir, 1)
    });
    let mut summaries = Vec::with_capacity(results.len());
    for r in results {
        summaries.push(r?);
    }
    let keys: Vec<String> = summaries[0]
        .iter()
        .map(|(k, _)| k.clone())
        .filter(|k| k != "wall_time_s")
        .collect();
    let mut header = vec![field.to_string()];
    header.extend(keys.iter().cloned());
    let rows: Vec<Vec<String>> = values
        .iter()
        .zip(&summaries)
        .map(|(v, s)| {
            let mut row = vec![value_label(v)];
            row.extend(keys.iter().map(|k| {
                s.iter()
                    .find(|(kk, _)| kk == k)
                    .map_or(String::new(), |e| e.1.clone())
            }));
            row
        })
        .collect();
    write_csv(&out.join("sweep.csv"), &header, &rows)?;
    Ok(vec![
        entry("sweep_key", key),
        entry("sweep_runs", values.len()),
    ])
}

/// Synthetic linear-Gaussian imaging problem.
pub struct GaussianProblem {
    pub world: GaussianPrior,
    pub vae: LinearGaussianVae,
    pub op: LinearForwardOp,
    pub y: Vector,
    pub x_true: Vector,
    pub z_true: Vector,
    pub c_true: Vector,
    pub c0: Vector,
}

fn build_operator(g: &GaussianSection, rng: &mut impl Rng) -> Result<LinearForwardOp, CliError> {
    let shape = (g.image[0], g.image[1]);
    Ok(match g.operator {
        OperatorName::Identity => LinearForwardOp::mask(shape, vec![true; shape.0 * shape.1])?,
        OperatorName::Blur => {
            LinearForwardOp::circular_conv(shape, binomial_kernel(g.kernel_width))?
        }
        OperatorName::RandomWalk => LinearForwardOp::circular_conv(
            shape,
            random_walk_kernel(g.kernel_width, g.walk_steps, rng),
        )?,
        OperatorName::Mask => {
            let keep = (0..shape.0 * shape.1)
                .map(|_| rng.random::<f64>() < g.keep_fraction)
                .collect();
            LinearForwardOp::mask(shape, keep)?
        }
        OperatorName::Downsample => {
            let f = g.factor.max(1);
            let filter = Matrix::from_element(f, f, 1.0 / (f * f) as f64);
            LinearForwardOp::downsample(shape, f, filter)?
        }
    })
}

pub fn build_gaussian_problem(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<GaussianProblem, CliError> {
    let g = &cfg.gaussian;
    let d = g.latent_dim;
    let pixels = g.image[0] * g.image[1];
    if d == 0 || pixels < d {
        return Err(CliError::Config(format!(
            "[gaussian] latent_dim {d} must be between 1 and the pixel count {pixels}"
        )));
    }
    if !(0.0 < g.prior_eig_min && g.prior_eig_min <= g.prior_eig_max) {
        return Err(CliError::Config(
            "[gaussian] prior eigenvalues need 0 < min <= max".into(),
        ));
    }
    let mut rng = seeded_rng(derive_seed(seed, PROBLEM_STREAM));
    let eig = random_spd(d, g.prior_eig_min, g.prior_eig_max, &mut rng);
    let world = GaussianPrior::from_eigen(eig, Matrix::identity(d, d), Vector::zeros(d))?;
    let cols: Vec<Vector> = (0..d)
        .map(|_| standard_normal_vec(&mut rng, pixels))
        .collect();
    let w = Matrix::from_columns(&cols) * (g.decoder_scale / (d as f64).sqrt());
    let decoder = AffineDecoder::new(
        w,
        Vector::from_element(pixels, g.decoder_offset),
        cfg.solver.sigma_dec,
    )?;
    let vae = LinearGaussianVae::optimal(decoder, cfg.solver.lambda)?;
    let op = build_operator(g, &mut rng)?;
    let c_true = standard_normal_vec(&mut rng, d);
    let z_true = world.sample(&c_true, &mut rng)?;
    let x_true = vae.decoder.decode(&z_true)?;
    let y =
        op.apply(&x_true)? + standard_normal_vec(&mut rng, op.output_len()) * cfg.solver.sigma_y;
    let c0 = &c_true + Vector::from_element(d, g.prompt_offset / (d as f64).sqrt());
    Ok(GaussianProblem {
        world,
        vae,
        op,
        y,
        x_true,
        z_true,
        c_true,
        c0,
    })
}

fn solve(
    cfg: &SolverConfig,
    y: &Vector,
    op: &LinearForwardOp,
    world: &dyn PriorModel,
    vae: &LinearGaussianVae,
    c0: &Vector,
) -> Result<RunReport, CliError> {
    run_cwgf(cfg, y, op, world, vae, c0).map_err(|e| match e {
        e @ cwgf_core::Error::AtIteration { .. } => CliError::Numeric(e),
        other => CliError::from(other),
    })
}

fn write_run_files(out: &Path, suffix: &str, report: &RunReport) -> Result<(), CliError> {
    write_report_csv(&out.join(format!("report{suffix}.csv")), report)?;
    write_vectors_csv(
        &out.join(format!("particles{suffix}.csv")),
        "particle",
        "z",
        &report.particles,
    )?;
    write_vectors_csv(
        &out.join(format!("prompt{suffix}.csv")),
        "k",
        "c",
        &report.prompt_trace,
    )?;
    if let Some(tr) = &report.trajectory {
        write_trajectory_csv(&out.join(format!("trajectory{suffix}.csv")), tr)?;
    }
    Ok(())
}

fn run_gaussian(
    cfg: &ExperimentConfig,
    problem_seed: u64,
    seed: u64,
    trace: bool,
    out: &Path,
) -> Result<Summary, CliError> {
    let p = build_gaussian_problem(cfg, problem_seed)?;
    let scfg = cfg.solver.to_solver_config(seed, trace)?;
    let report = solve(&scfg, &p.y, &p.op, &p.world, &p.vae, &p.c0)?;
    write_run_files(out, "", &report)?;

    let (rows, cols) = (cfg.gaussian.image[0], cfg.gaussian.image[1]);
    let mean = report.mean();
    let x_hat = p.vae.decoder.decode(&mean)?;
    write_pgm(&out.join("truth.pgm"), p.x_true.as_slice(), rows, cols)?;
    write_pgm(&out.join("estimate.pgm"), x_hat.as_slice(), rows, cols)?;
    let (or, oc) = p.op.output_shape();
    write_pgm(&out.join("observation.pgm"), p.y.as_slice(), or, oc)?;
    let tiles = report
        .particles
        .iter()
        .take(MAX_TILES)
        .map(|z| Ok(p.vae.decoder.decode(z)?.as_slice().to_vec()))
        .collect::<Result<Vec<_>, CliError>>()?;
    let (grid, gr, gc) = tile_images(&tiles, rows, cols);
    write_pgm(&out.join("particles.pgm"), &grid, gr, gc)?;

    let (mse, psnr) = metrics(x_hat.as_slice(), p.x_true.as_slice())?;
    let lik = LatentLikelihood::new(&p.vae.decoder, &p.op, cfg.solver.sigma_y)?;
    let c_star = p.world.mmle(&lik, &p.y)?;
    let post = p.world.latent_posterior(&c_star, &lik, &p.y)?;
    let mean_err = (0..mean.len())
        .map(|i| (mean[i] - post.mean[i]).abs() / post.cov[(i, i)].sqrt())
        .fold(0.0, f64::max);
    let last = report.records.last().expect("at least one iteration");
    Ok(vec![
        entry("experiment", "gaussian"),
        entry("problem_seed", problem_seed),
        entry("seed", seed),
        entry("iterations", report.records.len()),
        entry("particles", report.particles.len()),
        entry("mse", fmt_f64(mse)),
        entry("psnr_db", fmt_f64(psnr)),
        entry("final_data_fit", fmt_f64(last.mean_data_fit())),
        entry("posterior_mean_error_sd", fmt_f64(mean_err)),
        entry("prompt_error", fmt_f64((&report.prompt - &c_star).norm())),
        entry("initial_prompt_error", fmt_f64((&p.c0 - &c_star).norm())),
        entry("true_latent_error", fmt_f64((&mean - &p.z_true).norm())),
        entry(
            "true_prompt_distance",
            fmt_f64((&report.prompt - &p.c_true).norm()),
        ),
    ])
}

/// Bimodal inpainting problem: the first coordinate is hidden, the second observed.
pub struct GmmProblem {
    pub world: GmmPrior,
    pub vae: LinearGaussianVae,
    pub op: LinearForwardOp,
    pub y: Vector,
    pub c0: Vector,
}

pub fn build_gmm_problem(cfg: &ExperimentConfig) -> Result<GmmProblem, CliError> {
    let g = &cfg.gmm;
    let world = GmmPrior::bimodal(g.offset, g.std)?.with_flow_steps(g.flow_steps);
    let decoder = AffineDecoder::new(
        Matrix::identity(2, 2),
        Vector::zeros(2),
        cfg.solver.sigma_dec,
    )?;
    let vae = LinearGaussianVae::optimal(decoder, cfg.solver.lambda)?;
    let op = LinearForwardOp::mask((2, 1), vec![false, true])?;
    let y = Vector::from_vec(vec![0.0, g.observed_value]);
    Ok(GmmProblem {
        world,
        vae,
        op,
        y,
        c0: Vector::zeros(2),
    })
}

/// Particle counts per component and the variance along the hidden axis.
pub struct ComponentStats {
    pub counts: Vec<usize>,
    pub hidden_variance: f64,
}

pub fn component_stats(
    world: &GmmPrior,
    particles: &[Vector],
    c: &Vector,
) -> Result<ComponentStats, CliError> {
    let mut counts = vec![0; world.components().len()];
    for z in particles {
        counts[world.component_label(z, c)?] += 1;
    }
    let n = particles.len() as f64;
    let mean = particles.iter().map(|z| z[0]).sum::<f64>() / n;
    let hidden_variance = particles.iter().map(|z| (z[0] - mean).powi(2)).sum::<f64>() / n;
    Ok(ComponentStats {
        counts,
        hidden_variance,
    })
}

fn write_histogram(path: &Path, counts: &[usize]) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = counts
        .iter()
        .enumerate()
        .map(|(k, c)| vec![k.to_string(), c.to_string()])
        .collect();
    write_csv(path, &["component".to_string(), "count".to_string()], &rows)
}

fn smallest_and_largest_t_pi(report: &RunReport) -> (f64, f64) {
    let tmin = report
        .records
        .iter()
        .map(|r| r.t)
        .fold(f64::INFINITY, f64::min);
    let tmax = report
        .records
        .iter()
        .map(|r| r.t)
        .fold(f64::NEG_INFINITY, f64::max);
    let at = |t: f64| {
        report
            .records
            .iter()
            .rev()
            .find(|r| r.t == t)
            .map_or(f64::NAN, |r| r.pi_min_diag)
    };
    (at(tmin), at(tmax))
}

fn run_gmm(
    cfg: &ExperimentConfig,
    seed: u64,
    trace: bool,
    out: &Path,
    threads: usize,
) -> Result<Summary, CliError> {
    let p = build_gmm_problem(cfg)?;
    let mut summary = vec![entry("experiment", "gmm_inpaint"), entry("seed", seed)];
    if matches!(cfg.gmm.mode, GmmMode::Joint | GmmMode::Both) {
        let scfg = cfg.solver.to_solver_config(seed, trace)?;
        let report = solve(&scfg, &p.y, &p.op, &p.world, &p.vae, &p.c0)?;
        write_run_files(out, "_joint", &report)?;
        let stats = component_stats(&p.world, &report.particles, &report.prompt)?;
        write_histogram(&out.join("histogram_joint.csv"), &stats.counts)?;
        let (pi_small, pi_large) = smallest_and_largest_t_pi(&report);
        summary.extend([
            entry("joint_particles", report.particles.len()),
            entry("joint_counts", format!("{:?}", stats.counts)),
            entry("joint_hidden_variance", fmt_f64(stats.hidden_variance)),
            entry("pi_min_diag_smallest_t", fmt_f64(pi_small)),
            entry("pi_min_diag_largest_t", fmt_f64(pi_large)),
        ]);
    }
    if matches!(cfg.gmm.mode, GmmMode::Independent | GmmMode::Both) {
        let runs: Vec<u64> = (0..cfg.gmm.runs as u64).collect();
        let results = parallel_map(&runs, threads, |_, &r| {
            let run_seed = derive_seed(seed, INDEPENDENT_STREAM + r);
            let mut scfg = cfg.solver.to_solver_config(run_seed, false)?;
            scfg.particles = 1;
            Ok::<_, CliError>(
                solve(&scfg, &p.y, &p.op, &p.world, &p.vae, &p.c0)?.particles[0].clone(),
            )
        });
        let particles = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        write_vectors_csv(
            &out.join("particles_independent.csv"),
            "run",
            "z",
            &particles,
        )?;
        let stats = component_stats(&p.world, &particles, &p.c0)?;
        write_histogram(&out.join("histogram_independent.csv"), &stats.counts)?;
        summary.extend([
            entry("independent_runs", particles.len()),
            entry("independent_counts", format!("{:?}", stats.counts)),
            entry(
                "independent_hidden_variance",
                fmt_f64(stats.hidden_variance),
            ),
        ]);
    }
    Ok(summary)
}
