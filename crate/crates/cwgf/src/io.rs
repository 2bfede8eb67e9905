//! CSV, PGM and summary writers with locale-free, byte-stable output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use cwgf_core::solver::RunReport;
use cwgf_core::Vector;

use crate::error::CliError;

/// Shortest round-trip rendering of a float; `inf`, `-inf` and `nan` for non-finite values.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn indexed_header(first: &str, prefix: &str, n: usize) -> Vec<String> {
    std::iter::once(first.to_string())
        .chain((0..n).map(|i| format!("{prefix}{i}")))
        .collect()
}

/// One row per iteration.
pub fn write_report_csv(path: &Path, report: &RunReport) -> Result<(), CliError> {
    let header: Vec<String> = [
        "k",
        "index",
        "t",
        "prompt_grad_norm",
        "data_fit_mean",
        "data_fit_min",
        "data_fit_max",
        "functional",
        "fit_regularized",
        "pi_min_diag",
        "pi_mean_diag",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            let min = r.data_fit.iter().copied().fold(f64::INFINITY, f64::min);
            let max = r.data_fit.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (functional, reg) = match r.functional {
                Some(f) => (fmt_f64(f.value), f.regularized.to_string()),
                None => ("n/a".into(), "n/a".into()),
            };
            vec![
                r.k.to_string(),
                r.index.to_string(),
                fmt_f64(r.t),
                fmt_f64(r.prompt_grad_norm),
                fmt_f64(r.mean_data_fit()),
                fmt_f64(min),
                fmt_f64(max),
                functional,
                reg,
                fmt_f64(r.pi_min_diag),
                fmt_f64(r.pi_mean_diag),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// One row per vector, labelled by `first`.
pub fn write_vectors_csv(
    path: &Path,
    first: &str,
    prefix: &str,
    vectors: &[Vector],
) -> Result<(), CliError> {
    let dim = vectors.first().map_or(0, |v| v.len());
    let rows: Vec<Vec<String>> = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            std::iter::once(i.to_string())
                .chain(v.iter().map(|&x| fmt_f64(x)))
                .collect()
        })
        .collect();
    write_csv(path, &indexed_header(first, prefix, dim), &rows)
}

/// Particle positions after every iteration, one row per `(k, particle)`.
pub fn write_trajectory_csv(path: &Path, trajectory: &[Vec<Vector>]) -> Result<(), CliError> {
    let dim = trajectory
        .first()
        .and_then(|s| s.first())
        .map_or(0, |v| v.len());
    let mut header = vec!["k".to_string()];
    header.extend(indexed_header("particle", "z", dim));
    let mut rows = Vec::new();
    for (k, step) in trajectory.iter().enumerate() {
        for (n, z) in step.iter().enumerate() {
            let mut row = vec![k.to_string(), n.to_string()];
            row.extend(z.iter().map(|&x| fmt_f64(x)));
            rows.push(row);
        }
    }
    write_csv(path, &header, &rows)
}

/// Binary greyscale PGM (P5, maxval 255, row-major) of values clamped to `[0, 1]`.
pub fn write_pgm(path: &Path, values: &[f64], rows: usize, cols: usize) -> Result<(), CliError> {
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(CliError::Config(format!(
            "image of {} values does not fit a {rows}x{cols} grid",
            values.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|&v| to_byte(v)).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// Horizontal strip of equally sized images separated by one black column.
pub fn tile_images(images: &[Vec<f64>], rows: usize, cols: usize) -> (Vec<f64>, usize, usize) {
    let n = images.len();
    let width = n * cols + n.saturating_sub(1);
    let mut out = vec![0.0; rows * width];
    for (i, img) in images.iter().enumerate() {
        let x0 = i * (cols + 1);
        for r in 0..rows {
            for c in 0..cols {
                out[r * width + x0 + c] = img[r * cols + c];
            }
        }
    }
    (out, rows, width)
}

/// `key = value` lines in the given order.
pub fn write_summary(path: &Path, entries: &[(String, String)]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in entries {
        writeln!(w, "{k} = {v}")?;
    }
    w.flush()?;
    Ok(())
}
