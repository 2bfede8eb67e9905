//! Image reconstruction metrics.

use crate::error::CliError;

/// Mean squared error and PSNR in dB for pixel values in `[0, 1]`.
///
/// Identical inputs give `mse = 0` and `psnr = +inf`.
pub fn metrics(x_hat: &[f64], x_true: &[f64]) -> Result<(f64, f64), CliError> {
    if x_hat.len() != x_true.len() || x_hat.is_empty() {
        return Err(CliError::Config(format!(
            "metrics need equal non-empty shapes, got {} and {}",
            x_hat.len(),
            x_true.len()
        )));
    }
    let mse = x_hat
        .iter()
        .zip(x_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x_hat.len() as f64;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    };
    Ok((mse, psnr))
}
