//! Linear measurement operators with adjoints, fast regularised solves and the
//! Gaussian pixel-space posterior.
//!
//! Pixel grids are flattened row-major. Convolutions use periodic boundaries so
//! that `AᵀA` is diagonal in the discrete Fourier basis.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Complex;

use crate::error::{check_len, Error, Result};
use crate::linalg::cholesky;
use crate::{Matrix, Vector};

/// Grid shape as `(rows, cols)`. Plain vectors use `(n, 1)`.
pub type Shape = (usize, usize);

/// Relative residual required from every regularised solve.
pub const SOLVE_TOLERANCE: f64 = 1e-8;
/// Iteration cap of the conjugate-gradient fallback.
pub const CG_MAX_ITERATIONS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Dense(Matrix),
    CircularConv {
        kernel: Matrix,
        spectrum: Vec<Complex<f64>>,
    },
    Mask(Vec<bool>),
    Downsample {
        factor: usize,
        filter: Matrix,
    },
}

/// Measurement operator `A` together with its adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForwardOp {
    kind: Kind,
    input_shape: Shape,
    output_shape: Shape,
}

impl LinearForwardOp {
    /// Dense `m × n` matrix acting on plain vectors.
    pub fn dense(a: Matrix) -> Self {
        let (m, n) = a.shape();
        LinearForwardOp {
            kind: Kind::Dense(a),
            input_shape: (n, 1),
            output_shape: (m, 1),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::mask((n, 1), vec![true; n]).expect("mask length matches")
    }

    /// Periodic convolution of a `shape` grid with `kernel`, centred at `(kh/2, kw/2)`.
    pub fn circular_conv(shape: Shape, kernel: Matrix) -> Result<Self> {
        if shape.0 == 0 || shape.1 == 0 || kernel.is_empty() {
            return Err(Error::config(
                "convolution needs a non-empty grid and kernel",
            ));
        }
        let spectrum = kernel_spectrum(shape, &kernel);
        Ok(LinearForwardOp {
            kind: Kind::CircularConv { kernel, spectrum },
            input_shape: shape,
            output_shape: shape,
        })
    }

    /// Keep pixels where `keep` is true and zero the others; output has the input shape.
    pub fn mask(shape: Shape, keep: Vec<bool>) -> Result<Self> {
        check_len("mask", shape.0 * shape.1, keep.len())?;
        Ok(LinearForwardOp {
            kind: Kind::Mask(keep),
            input_shape: shape,
            output_shape: shape,
        })
    }

    /// Periodic filtering with `filter` followed by decimation by `factor`.
    pub fn downsample(shape: Shape, factor: usize, filter: Matrix) -> Result<Self> {
        if factor == 0 || !shape.0.is_multiple_of(factor) || !shape.1.is_multiple_of(factor) {
            return Err(Error::config(alloc::format!(
                "downsample factor {factor} must divide the grid {}x{}",
                shape.0,
                shape.1
            )));
        }
        if filter.is_empty() {
            return Err(Error::config("downsample filter is empty"));
        }
        Ok(LinearForwardOp {
            kind: Kind::Downsample { factor, filter },
            input_shape: shape,
            output_shape: (shape.0 / factor, shape.1 / factor),
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.output_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.0 * self.input_shape.1
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.0 * self.output_shape.1
    }

    /// `A x`.
    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        check_len("LinearForwardOp::apply", self.input_len(), x.len())?;
        Ok(match &self.kind {
            Kind::Dense(a) => a * x,
            Kind::CircularConv { kernel, .. } => conv(self.input_shape, kernel, x, false),
            Kind::Mask(keep) => masked(keep, x),
            Kind::Downsample { factor, filter } => {
                let f = conv(self.input_shape, filter, x, false);
                let (rows, cols) = self.output_shape;
                Vector::from_fn(rows * cols, |k, _| {
                    let (i, j) = (k / cols, k % cols);
                    f[i * factor * self.input_shape.1 + j * factor]
                })
            }
        })
    }

    /// `Aᵀ y`.
    pub fn apply_adjoint(&self, y: &Vector) -> Result<Vector> {
        check_len("LinearForwardOp::apply_adjoint", self.output_len(), y.len())?;
        Ok(match &self.kind {
            Kind::Dense(a) => a.tr_mul(y),
            Kind::CircularConv { kernel, .. } => conv(self.input_shape, kernel, y, true),
            Kind::Mask(keep) => masked(keep, y),
            Kind::Downsample { factor, filter } => {
                let cols_in = self.input_shape.1;
                let cols_out = self.output_shape.1;
                let mut up = Vector::zeros(self.input_len());
                for (k, &v) in y.iter().enumerate() {
                    let (i, j) = (k / cols_out, k % cols_out);
                    up[i * factor * cols_in + j * factor] = v;
                }
                conv(self.input_shape, filter, &up, true)
            }
        })
    }

    /// `AᵀA x`.
    pub fn gram_apply(&self, x: &Vector) -> Result<Vector> {
        self.apply_adjoint(&self.apply(x)?)
    }

    /// Explicit matrix of the operator.
    pub fn to_dense(&self) -> Result<Matrix> {
        if let Kind::Dense(a) = &self.kind {
            return Ok(a.clone());
        }
        let n = self.input_len();
        let mut out = Matrix::zeros(self.output_len(), n);
        for j in 0..n {
            let mut e = Vector::zeros(n);
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e)?);
        }
        Ok(out)
    }

    /// Solve `(a I + b AᵀA) x = rhs`.
    ///
    /// Masks and convolutions use their exact diagonalisation, dense operators a
    /// Cholesky factorisation and downsampling conjugate gradients. The result is
    /// always checked to have relative residual at most [`SOLVE_TOLERANCE`].
    pub fn regularized_solve(&self, a: f64, b: f64, rhs: &Vector) -> Result<Vector> {
        if !(a > 0.0 && b >= 0.0) {
            return Err(Error::domain(alloc::format!(
                "regularised solve needs a > 0 and b >= 0 (got {a}, {b})"
            )));
        }
        check_len("regularized_solve", self.input_len(), rhs.len())?;
        if b == 0.0 {
            return Ok(rhs / a);
        }
        let x = match &self.kind {
            Kind::Dense(m) => {
                let n = m.ncols();
                let sys = Matrix::identity(n, n) * a + m.tr_mul(m) * b;
                cholesky(&sys)?.solve(rhs)
            }
            Kind::Mask(keep) => Vector::from_fn(rhs.len(), |i, _| {
                rhs[i] / (a + if keep[i] { b } else { 0.0 })
            }),
            Kind::CircularConv { spectrum, .. } => {
                let (rows, cols) = self.input_shape;
                let mut hat: Vec<Complex<f64>> =
                    rhs.iter().map(|&v| Complex::new(v, 0.0)).collect();
                dft2(&mut hat, rows, cols, false);
                for (h, k) in hat.iter_mut().zip(spectrum.iter()) {
                    *h /= a + b * k.norm_sqr();
                }
                dft2(&mut hat, rows, cols, true);
                Vector::from_iterator(rhs.len(), hat.iter().map(|c| c.re))
            }
            Kind::Downsample { .. } => return self.conjugate_gradient(a, b, rhs),
        };
        let residual = self.relative_residual(a, b, &x, rhs)?;
        if residual > SOLVE_TOLERANCE {
            return Err(Error::NotConverged {
                iterations: 1,
                residual,
            });
        }
        Ok(x)
    }

    fn relative_residual(&self, a: f64, b: f64, x: &Vector, rhs: &Vector) -> Result<f64> {
        let r = x * a + self.gram_apply(x)? * b - rhs;
        let scale = rhs.norm();
        Ok(if scale > 0.0 {
            r.norm() / scale
        } else {
            r.norm()
        })
    }

    fn conjugate_gradient(&self, a: f64, b: f64, rhs: &Vector) -> Result<Vector> {
        let scale = rhs.norm();
        let mut x = Vector::zeros(rhs.len());
        if scale == 0.0 {
            return Ok(x);
        }
        let mut r = rhs.clone();
        let mut p = r.clone();
        let mut rr = r.norm_squared();
        for it in 0..CG_MAX_ITERATIONS {
            if libm::sqrt(rr) <= SOLVE_TOLERANCE * scale {
                return Ok(x);
            }
            let ap = &p * a + self.gram_apply(&p)? * b;
            let step = rr / p.dot(&ap);
            x.axpy(step, &p, 1.0);
            r.axpy(-step, &ap, 1.0);
            let rr_new = r.norm_squared();
            if !rr_new.is_finite() {
                return Err(Error::NotConverged {
                    iterations: it + 1,
                    residual: f64::NAN,
                });
            }
            p = &r + &p * (rr_new / rr);
            rr = rr_new;
        }
        let residual = self.relative_residual(a, b, &x, rhs)?;
        if residual <= SOLVE_TOLERANCE {
            Ok(x)
        } else {
            Err(Error::NotConverged {
                iterations: CG_MAX_ITERATIONS,
                residual,
            })
        }
    }
}

fn masked(keep: &[bool], x: &Vector) -> Vector {
    Vector::from_fn(x.len(), |i, _| if keep[i] { x[i] } else { 0.0 })
}

/// Periodic convolution `y[i] = Σ_u k[u] x[i − u + c]`, or its adjoint.
fn conv(shape: Shape, kernel: &Matrix, x: &Vector, adjoint: bool) -> Vector {
    let (rows, cols) = shape;
    let (kh, kw) = kernel.shape();
    let (ch, cw) = (kh / 2, kw / 2);
    let mut y = Vector::zeros(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for u in 0..kh {
                for v in 0..kw {
                    let du = u as isize - ch as isize;
                    let dv = v as isize - cw as isize;
                    let (si, sj) = if adjoint { (du, dv) } else { (-du, -dv) };
                    let ii = (i as isize + si).rem_euclid(rows as isize) as usize;
                    let jj = (j as isize + sj).rem_euclid(cols as isize) as usize;
                    acc += kernel[(u, v)] * x[ii * cols + jj];
                }
            }
            y[i * cols + j] = acc;
        }
    }
    y
}

/// Fourier multipliers of the periodic convolution with `kernel` on a `shape` grid.
fn kernel_spectrum(shape: Shape, kernel: &Matrix) -> Vec<Complex<f64>> {
    let (rows, cols) = shape;
    let (kh, kw) = kernel.shape();
    let mut grid = vec![Complex::new(0.0, 0.0); rows * cols];
    for u in 0..kh {
        for v in 0..kw {
            let i = (u as isize - (kh / 2) as isize).rem_euclid(rows as isize) as usize;
            let j = (v as isize - (kw / 2) as isize).rem_euclid(cols as isize) as usize;
            grid[i * cols + j].re += kernel[(u, v)];
        }
    }
    dft2(&mut grid, rows, cols, false);
    grid
}

/// In-place separable 2-D DFT; the inverse includes the `1/(rows·cols)` factor.
fn dft2(data: &mut [Complex<f64>], rows: usize, cols: usize, inverse: bool) {
    let mut buf = vec![Complex::new(0.0, 0.0); rows.max(cols)];
    for i in 0..rows {
        dft1(
            &mut data[i * cols..(i + 1) * cols],
            &mut buf[..cols],
            inverse,
        );
    }
    let mut column = vec![Complex::new(0.0, 0.0); rows];
    for j in 0..cols {
        for i in 0..rows {
            column[i] = data[i * cols + j];
        }
        dft1(&mut column, &mut buf[..rows], inverse);
        for i in 0..rows {
            data[i * cols + j] = column[i];
        }
    }
    if inverse {
        let scale = 1.0 / (rows * cols) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

fn dft1(x: &mut [Complex<f64>], out: &mut [Complex<f64>], inverse: bool) {
    let n = x.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex::new(0.0, 0.0);
        for (j, &v) in x.iter().enumerate() {
            let angle = sign * 2.0 * core::f64::consts::PI * ((k * j) % n) as f64 / n as f64;
            acc += v * Complex::new(libm::cos(angle), libm::sin(angle));
        }
        *o = acc;
    }
    x.copy_from_slice(out);
}

/// Mean of the Gaussian pixel posterior
/// `m = Σ(σ_dec⁻² d + σ_y⁻² Aᵀy)` with `Σ = (σ_dec⁻² I + σ_y⁻² AᵀA)⁻¹`.
pub fn pixel_posterior_mean(
    op: &LinearForwardOp,
    decoder_out: &Vector,
    y: &Vector,
    sigma_dec: f64,
    sigma_y: f64,
) -> Result<Vector> {
    check_sigmas(sigma_dec, sigma_y)?;
    check_len("pixel_posterior_mean", op.input_len(), decoder_out.len())?;
    let (pd, py) = (1.0 / (sigma_dec * sigma_dec), 1.0 / (sigma_y * sigma_y));
    let rhs = decoder_out * pd + op.apply_adjoint(y)? * py;
    op.regularized_solve(pd, py, &rhs)
}

/// Covariance `Σ = (σ_dec⁻² I + σ_y⁻² AᵀA)⁻¹` of the pixel posterior, as a dense matrix.
pub fn pixel_posterior_covariance(
    op: &LinearForwardOp,
    sigma_dec: f64,
    sigma_y: f64,
) -> Result<Matrix> {
    check_sigmas(sigma_dec, sigma_y)?;
    let (pd, py) = (1.0 / (sigma_dec * sigma_dec), 1.0 / (sigma_y * sigma_y));
    let n = op.input_len();
    let mut out = Matrix::zeros(n, n);
    for j in 0..n {
        let mut e = Vector::zeros(n);
        e[j] = 1.0;
        out.set_column(j, &op.regularized_solve(pd, py, &e)?);
    }
    Ok(crate::linalg::symmetrize(&out))
}

fn check_sigmas(sigma_dec: f64, sigma_y: f64) -> Result<()> {
    if sigma_dec > 0.0 && sigma_y > 0.0 {
        Ok(())
    } else {
        Err(Error::domain("noise levels must be positive"))
    }
}

/// Normalised separable binomial blur kernel of the given width.
pub fn binomial_kernel(width: usize) -> Matrix {
    let mut row = vec![1.0f64];
    for _ in 1..width.max(1) {
        let mut next = vec![1.0; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let total: f64 = row.iter().sum();
    let w = row.len();
    Matrix::from_fn(w, w, |i, j| row[i] * row[j] / (total * total))
}

/// Seeded motion-like blur kernel: a normalised random-walk trace on a `size × size` grid.
pub fn random_walk_kernel<R: rand::Rng + ?Sized>(size: usize, steps: usize, rng: &mut R) -> Matrix {
    let size = size.max(1);
    let mut k = Matrix::zeros(size, size);
    let (mut i, mut j) = (size / 2, size / 2);
    k[(i, j)] += 1.0;
    for _ in 0..steps {
        match rng.random_range(0..4u8) {
            0 if i + 1 < size => i += 1,
            1 if i > 0 => i -= 1,
            2 if j + 1 < size => j += 1,
            3 if j > 0 => j -= 1,
            _ => {}
        }
        k[(i, j)] += 1.0;
    }
    let total = k.sum();
    k / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spd_inverse;
    use crate::rng::{seeded_rng, standard_normal_vec};
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let v = standard_normal_vec(&mut seeded_rng(seed), rows * cols);
        Matrix::from_column_slice(rows, cols, v.as_slice())
    }

    fn ops() -> Vec<LinearForwardOp> {
        let kernel = random_matrix(3, 3, 5).map(|v| v.abs());
        vec![
            LinearForwardOp::dense(random_matrix(5, 8, 1)),
            LinearForwardOp::circular_conv((6, 5), kernel.clone()).unwrap(),
            LinearForwardOp::circular_conv((4, 4), random_matrix(5, 2, 8)).unwrap(),
            LinearForwardOp::mask((3, 4), (0..12).map(|i| i % 3 != 0).collect()).unwrap(),
            LinearForwardOp::downsample((6, 4), 2, kernel).unwrap(),
        ]
    }

    fn adjoint_gap(op: &LinearForwardOp, seed: u64) -> f64 {
        let mut rng = seeded_rng(seed);
        let x = standard_normal_vec(&mut rng, op.input_len());
        let y = standard_normal_vec(&mut rng, op.output_len());
        let lhs = op.apply(&x).unwrap().dot(&y);
        let rhs = x.dot(&op.apply_adjoint(&y).unwrap());
        (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
    }

    #[test]
    fn adjoint_pairs() {
        for (k, op) in ops().iter().enumerate() {
            assert!(adjoint_gap(op, 100 + k as u64) < 1e-10, "op {k}");
        }
    }

    #[test]
    fn dense_adjoint_is_transpose() {
        let a = random_matrix(5, 8, 2);
        let op = LinearForwardOp::dense(a.clone());
        let y = standard_normal_vec(&mut seeded_rng(4), 5);
        assert!((op.apply_adjoint(&y).unwrap() - a.transpose() * &y).amax() < 1e-12);
    }

    #[test]
    fn identity_cases() {
        let x = standard_normal_vec(&mut seeded_rng(3), 12);
        let all = LinearForwardOp::mask((3, 4), vec![true; 12]).unwrap();
        assert_eq!(all.apply(&x).unwrap(), x);
        let mut delta = Matrix::zeros(3, 3);
        delta[(1, 1)] = 1.0;
        let conv = LinearForwardOp::circular_conv((3, 4), delta).unwrap();
        assert!((conv.apply(&x).unwrap() - &x).amax() < 1e-15);
    }

    #[test]
    fn shift_kernel_moves_pixels() {
        // a kernel with its mass right of centre shifts the image right by one column
        let mut k = Matrix::zeros(1, 3);
        k[(0, 2)] = 1.0;
        let op = LinearForwardOp::circular_conv((1, 4), k).unwrap();
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            op.apply(&x).unwrap(),
            Vector::from_vec(vec![4.0, 1.0, 2.0, 3.0])
        );
    }

    #[test]
    fn solves_match_dense_inverse() {
        for (k, op) in ops().iter().enumerate() {
            let rhs = standard_normal_vec(&mut seeded_rng(50 + k as u64), op.input_len());
            let x = op.regularized_solve(0.7, 2.3, &rhs).unwrap();
            let a = op.to_dense().unwrap();
            let n = a.ncols();
            let sys = Matrix::identity(n, n) * 0.7 + a.transpose() * &a * 2.3;
            let reference = spd_inverse(&sys).unwrap() * &rhs;
            assert!(
                (x - &reference).amax() < 1e-10 * reference.amax().max(1.0),
                "op {k}"
            );
        }
    }

    #[test]
    fn dense_d8_solve_matches_inverse() {
        let op = LinearForwardOp::dense(random_matrix(8, 8, 21));
        let rhs = standard_normal_vec(&mut seeded_rng(22), 8);
        let x = op.regularized_solve(1.5, 0.25, &rhs).unwrap();
        let a = op.to_dense().unwrap();
        let sys = Matrix::identity(8, 8) * 1.5 + a.transpose() * &a * 0.25;
        let reference = sys.try_inverse().unwrap() * &rhs;
        assert!((x - &reference).norm() / reference.norm() < 1e-10);
    }

    #[test]
    fn trivial_solves() {
        let rhs = standard_normal_vec(&mut seeded_rng(7), 12);
        let keep: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();
        let op = LinearForwardOp::mask((3, 4), keep.clone()).unwrap();
        assert_eq!(op.regularized_solve(2.0, 0.0, &rhs).unwrap(), &rhs / 2.0);
        let x = op.regularized_solve(2.0, 3.0, &rhs).unwrap();
        for i in 0..12 {
            let expect = rhs[i] / (2.0 + if keep[i] { 3.0 } else { 0.0 });
            assert!((x[i] - expect).abs() < 1e-15);
        }
        assert!(op.regularized_solve(0.0, 1.0, &rhs).is_err());
    }

    #[test]
    fn pixel_posterior_limits() {
        let mut rng = seeded_rng(8);
        let d = standard_normal_vec(&mut rng, 6);
        let y = standard_normal_vec(&mut rng, 6);
        let op = LinearForwardOp::identity(6);
        let m = pixel_posterior_mean(&op, &d, &y, 0.3, 0.3).unwrap();
        assert!((m - (&d + &y) / 2.0).amax() < 1e-14);
        let far = pixel_posterior_mean(&op, &d, &y, 0.3, 1e8).unwrap();
        assert!((far - &d).amax() < 1e-12);
    }

    #[test]
    fn pixel_posterior_is_stationary() {
        let op = LinearForwardOp::circular_conv((4, 4), binomial_kernel(3)).unwrap();
        let mut rng = seeded_rng(9);
        let d = standard_normal_vec(&mut rng, 16);
        let y = standard_normal_vec(&mut rng, 16);
        let (sd, sy) = (0.2, 0.05);
        let m = pixel_posterior_mean(&op, &d, &y, sd, sy).unwrap();
        let resid = op.apply(&m).unwrap() - &y;
        let grad = op.apply_adjoint(&resid).unwrap() / (sy * sy) + (&m - &d) / (sd * sd);
        assert!(grad.amax() < 1e-8 * (y.amax() / (sy * sy)));
    }

    #[test]
    fn binomial_kernel_is_normalised() {
        let k = binomial_kernel(5);
        assert_eq!(k.shape(), (5, 5));
        assert!((k.sum() - 1.0).abs() < 1e-15);
        assert!((k[(2, 2)] - 36.0 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn random_walk_kernel_is_seeded_and_normalised() {
        let a = random_walk_kernel(7, 20, &mut seeded_rng(4));
        assert!((a.sum() - 1.0).abs() < 1e-15);
        assert!(a.iter().all(|&v| v >= 0.0));
        assert_eq!(a, random_walk_kernel(7, 20, &mut seeded_rng(4)));
    }

    #[test]
    fn shape_errors() {
        let op = LinearForwardOp::identity(3);
        assert!(op.apply(&Vector::zeros(4)).is_err());
        assert!(LinearForwardOp::downsample((5, 4), 2, binomial_kernel(3)).is_err());
        assert!(LinearForwardOp::mask((2, 2), vec![true; 3]).is_err());
    }

    proptest! {
        #[test]
        fn conv_adjoint_random_kernels(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..6) {
            let op = LinearForwardOp::circular_conv((rows, cols), random_matrix(3, 2, seed)).unwrap();
            prop_assert!(adjoint_gap(&op, seed + 1) < 1e-10);
        }

        #[test]
        fn solve_residual_small(seed in 0u64..1000, a in 0.01f64..10.0, b in 0.0f64..100.0) {
            for op in ops() {
                let rhs = standard_normal_vec(&mut seeded_rng(seed), op.input_len());
                let x = op.regularized_solve(a, b, &rhs).unwrap();
                let r = &x * a + op.gram_apply(&x).unwrap() * b - &rhs;
                prop_assert!(r.norm() <= 1e-8 * rhs.norm());
            }
        }
    }
}
