//! Blind kernel estimation by alternating minimization.
//!
//! Latent image: anisotropic total variation, solved by half-quadratic
//! splitting with FFT inner solves. Kernel: least squares in the gradient
//! domain over the kernel window (conjugate gradients), then projected to
//! nonnegative unit-sum. Coarse-to-fine over an image pyramid.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{report, Progress, PsfEstimate, SolverStatus};
use crate::error::{AoError, Result};
use crate::fft;
use crate::optics::{convolve_circular, Measurement, Psf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlindOptions {
    /// TV weight at the coarsest scale.
    pub lambda: f64,
    /// Multiplier applied to `lambda` at each finer scale.
    pub lambda_decay: f64,
    pub iterations_per_scale: usize,
    /// Kernel side at the coarsest scale (odd).
    pub min_kernel: usize,
    /// Ridge on the kernel least-squares system, relative to the data term.
    pub kernel_ridge: f64,
    pub cg_iterations: usize,
    /// Half-quadratic splitting stages per latent update.
    pub hqs_steps: usize,
    /// Kernel samples below this fraction of the peak are zeroed.
    pub prune_fraction: f64,
    /// Patch side of the multi-frame tiling; the kernel must fit in a patch.
    pub patch_size: usize,
    /// Relative L1 kernel change that counts as converged.
    pub tolerance: f64,
    /// Fraction of the strongest latent gradients used in the kernel step;
    /// values outside (0, 1) use all of them.
    pub edge_fraction: f64,
}

impl Default for BlindOptions {
    fn default() -> Self {
        Self {
            lambda: 2e-3,
            lambda_decay: 0.5,
            iterations_per_scale: 20,
            min_kernel: 7,
            kernel_ridge: 1e-3,
            cg_iterations: 25,
            hqs_steps: 8,
            prune_fraction: 0.05,
            patch_size: 64,
            tolerance: 1e-3,
            edge_fraction: 0.2,
        }
    }
}

/// Estimates a `kernel_size x kernel_size` unit-energy kernel from a single
/// measurement.
pub fn estimate_psf_blind(
    measurement: &Measurement,
    kernel_size: usize,
    opts: &BlindOptions,
) -> Result<PsfEstimate> {
    estimate_psf_blind_observed(measurement, kernel_size, opts, None)
}

pub fn estimate_psf_blind_observed(
    measurement: &Measurement,
    kernel_size: usize,
    opts: &BlindOptions,
    progress: Progress<'_>,
) -> Result<PsfEstimate> {
    let (h, w) = measurement.dim();
    if kernel_size.is_multiple_of(2) || kernel_size == 0 {
        return Err(AoError::Argument(format!("kernel size must be odd, got {kernel_size}")));
    }
    if kernel_size > opts.patch_size || kernel_size > h.min(w) {
        return Err(AoError::Argument(format!(
            "kernel size {kernel_size} exceeds the patch or measurement size"
        )));
    }
    let y = measurement.pixels();
    let total: f64 = y.sum();
    if !(total > 0.0) {
        return Err(AoError::Argument("measurement is all zero".into()));
    }

    // Pyramid, finest first.
    let mut pyramid = vec![y.clone()];
    let mut ksizes = vec![kernel_size];
    loop {
        let last = pyramid.last().unwrap();
        let k = *ksizes.last().unwrap();
        let next_k = odd_half(k);
        if next_k < opts.min_kernel.max(3) || last.nrows() < 32 || last.ncols() < 32 {
            break;
        }
        pyramid.push(downsample2(&last.view()));
        ksizes.push(next_k);
    }
    pyramid.reverse();
    ksizes.reverse();

    let mut kernel = initial_kernel(ksizes[0]);
    let mut lambda = opts.lambda;
    let mut iterations_used = 0;
    let mut converged_last = false;
    let mut latent = pyramid[0].clone();
    for (level, (yl, &ks)) in pyramid.iter().zip(&ksizes).enumerate() {
        if level > 0 {
            kernel = upsample_kernel(&kernel.view(), ks);
        }
        let ops = DiffOperators::new(yl.dim());
        converged_last = false;
        for _ in 0..opts.iterations_per_scale {
            latent = latent_tv(yl, &kernel, lambda, opts.hqs_steps, &ops);
            let next = kernel_update(&latent, yl, &kernel, opts);
            let change = next
                .iter()
                .zip(kernel.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            kernel = next;
            iterations_used += 1;
            report(progress, "psf", iterations_used, change);
            if change < opts.tolerance {
                converged_last = true;
                break;
            }
        }
        lambda *= opts.lambda_decay;
    }

    let blurred = convolve_circular(&latent.view(), &kernel.view());
    let fidelity: f64 = blurred
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let psf = Psf::new(kernel)?.normalized();
    Ok(PsfEstimate {
        psf,
        fidelity,
        iterations_used,
        status: if converged_last {
            SolverStatus::Converged
        } else {
            SolverStatus::NotConverged
        },
    })
}

fn odd_half(k: usize) -> usize {
    let h = k / 2;
    if h.is_multiple_of(2) {
        h + 1
    } else {
        h
    }
}

fn initial_kernel(size: usize) -> Array2<f64> {
    let mut k = Array2::zeros((size, size));
    let c = size / 2;
    for i in c.saturating_sub(1)..=(c + 1).min(size - 1) {
        for j in c.saturating_sub(1)..=(c + 1).min(size - 1) {
            k[(i, j)] = if i == c && j == c { 2.0 } else { 1.0 };
        }
    }
    let s = k.sum();
    k / s
}

/// 2x2 box average; odd trailing rows/columns are dropped.
fn downsample2(a: &ArrayView2<f64>) -> Array2<f64> {
    let (r, c) = (a.nrows() / 2, a.ncols() / 2);
    Array2::from_shape_fn((r, c), |(i, j)| {
        0.25 * (a[(2 * i, 2 * j)] + a[(2 * i + 1, 2 * j)] + a[(2 * i, 2 * j + 1)]
            + a[(2 * i + 1, 2 * j + 1)])
    })
}

/// Bilinear 2x upsampling of a centered kernel into a `size x size` window.
fn upsample_kernel(k: &ArrayView2<f64>, size: usize) -> Array2<f64> {
    let (kr, kc) = k.dim();
    let (cr, cc) = ((kr / 2) as f64, (kc / 2) as f64);
    let c = (size / 2) as f64;
    let sample = |y: f64, x: f64| -> f64 {
        if y < 0.0 || x < 0.0 || y > (kr - 1) as f64 || x > (kc - 1) as f64 {
            return 0.0;
        }
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(kr - 1), (x0 + 1).min(kc - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        (1.0 - fy) * ((1.0 - fx) * k[(y0, x0)] + fx * k[(y0, x1)])
            + fy * ((1.0 - fx) * k[(y1, x0)] + fx * k[(y1, x1)])
    };
    let mut out = Array2::from_shape_fn((size, size), |(i, j)| {
        sample((i as f64 - c) / 2.0 + cr, (j as f64 - c) / 2.0 + cc)
    });
    let s = out.sum();
    if s > 0.0 {
        out /= s;
    } else {
        out = initial_kernel(size);
    }
    out
}

/// Frequency responses of the forward differences on a circular grid.
struct DiffOperators {
    dx: Array2<Complex64>,
    dy: Array2<Complex64>,
}

impl DiffOperators {
    fn new((r, c): (usize, usize)) -> Self {
        use std::f64::consts::PI;
        let dx = Array2::from_shape_fn((r, c), |(_, l)| {
            Complex64::from_polar(1.0, 2.0 * PI * l as f64 / c as f64) - 1.0
        });
        let dy = Array2::from_shape_fn((r, c), |(k, _)| {
            Complex64::from_polar(1.0, 2.0 * PI * k as f64 / r as f64) - 1.0
        });
        Self { dx, dy }
    }
}

fn grad_x(a: &Array2<f64>) -> Array2<f64> {
    let (r, c) = a.dim();
    Array2::from_shape_fn((r, c), |(i, j)| a[(i, (j + 1) % c)] - a[(i, j)])
}

fn grad_y(a: &Array2<f64>) -> Array2<f64> {
    let (r, c) = a.dim();
    Array2::from_shape_fn((r, c), |(i, j)| a[((i + 1) % r, j)] - a[(i, j)])
}

/// Circular embedding of a centered kernel with its center at (0, 0).
pub(crate) fn embed(kernel: &Array2<f64>, dim: (usize, usize)) -> Array2<f64> {
    let (kr, kc) = kernel.dim();
    let mut out = Array2::zeros(dim);
    for ((a, b), v) in kernel.indexed_iter() {
        let i = (a as isize - (kr / 2) as isize).rem_euclid(dim.0 as isize) as usize;
        let j = (b as isize - (kc / 2) as isize).rem_euclid(dim.1 as isize) as usize;
        out[(i, j)] += v;
    }
    out
}

/// Inverse of [`embed`] for a `size x size` window.
fn extract(full: &Array2<f64>, size: usize) -> Array2<f64> {
    let (r, c) = full.dim();
    Array2::from_shape_fn((size, size), |(a, b)| {
        let i = (a as isize - (size / 2) as isize).rem_euclid(r as isize) as usize;
        let j = (b as isize - (size / 2) as isize).rem_euclid(c as isize) as usize;
        full[(i, j)]
    })
}

fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `argmin_x ‖k ⊛ x − y‖² + λ‖∇x‖₁` by half-quadratic splitting.
fn latent_tv(
    y: &Array2<f64>,
    kernel: &Array2<f64>,
    lambda: f64,
    steps: usize,
    ops: &DiffOperators,
) -> Array2<f64> {
    let dim = y.dim();
    let fk = fft::fft2_real(&embed(kernel, dim).view());
    let fy = fft::fft2_real(&y.view());
    let ktk = fk.mapv(|z| z.norm_sqr());
    let kty = &fk.mapv(|z| z.conj()) * &fy;
    let dtd = &ops.dx.mapv(|z| z.norm_sqr()) + &ops.dy.mapv(|z| z.norm_sqr());
    let mut x = y.clone();
    let mut beta = 2.0 * lambda;
    for _ in 0..steps.max(1) {
        let t = lambda / (2.0 * beta);
        let ux = grad_x(&x).mapv(|v| shrink(v, t));
        let uy = grad_y(&x).mapv(|v| shrink(v, t));
        let fux = fft::fft2_real(&ux.view());
        let fuy = fft::fft2_real(&uy.view());
        let mut num = kty.clone();
        ndarray::Zip::from(&mut num)
            .and(&fux)
            .and(&fuy)
            .and(&ops.dx)
            .and(&ops.dy)
            .for_each(|n, a, b, dx, dy| *n += beta * (dx.conj() * a + dy.conj() * b));
        let den = &ktk + &(&dtd * beta);
        let fx = ndarray::Zip::from(&num)
            .and(&den)
            .map_collect(|n, d| n / Complex64::new(d.max(1e-12), 0.0));
        x = fft::ifft2_real(&fx);
        beta *= 2.0;
    }
    x
}

/// Gradient-domain kernel least squares over the kernel window, followed by
/// projection to a nonnegative, unit-sum, recentered kernel.
fn kernel_update(
    latent: &Array2<f64>,
    y: &Array2<f64>,
    current: &Array2<f64>,
    opts: &BlindOptions,
) -> Array2<f64> {
    let dim = y.dim();
    let size = current.nrows();
    let (mut lx, mut ly) = (grad_x(latent), grad_y(latent));
    if opts.edge_fraction > 0.0 && opts.edge_fraction < 1.0 {
        let mut mags: Vec<f64> = lx.iter().zip(ly.iter()).map(|(a, b)| a * a + b * b).collect();
        let keep = ((mags.len() as f64 * opts.edge_fraction) as usize).clamp(1, mags.len());
        let cut_at = mags.len() - keep;
        let (_, t, _) = mags.select_nth_unstable_by(cut_at, f64::total_cmp);
        let t = *t;
        ndarray::Zip::from(&mut lx).and(&mut ly).for_each(|a, b| {
            if *a * *a + *b * *b < t {
                *a = 0.0;
                *b = 0.0;
            }
        });
    }
    let gxx = fft::fft2_real(&lx.view());
    let gxy = fft::fft2_real(&ly.view());
    let gyx = fft::fft2_real(&grad_x(y).view());
    let gyy = fft::fft2_real(&grad_y(y).view());
    let spectrum = &gxx.mapv(|z| z.norm_sqr()) + &gxy.mapv(|z| z.norm_sqr());
    let cross = &(&gxx.mapv(|z| z.conj()) * &gyx) + &(&gxy.mapv(|z| z.conj()) * &gyy);
    let b = extract(&fft::ifft2_real(&cross), size);
    let scale = spectrum.sum() / spectrum.len() as f64;
    let ridge = opts.kernel_ridge * scale.max(1e-300);
    let apply = |k: &Array2<f64>| -> Array2<f64> {
        let fk = fft::fft2_real(&embed(k, dim).view());
        let prod = &fk * &spectrum;
        extract(&fft::ifft2_real(&prod), size) + &(k * ridge)
    };

    // Conjugate gradients warm-started at the current kernel.
    let mut k = current.clone();
    let mut r = &b - &apply(&k);
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let rr0 = rr.max(1e-300);
    for _ in 0..opts.cg_iterations {
        if rr <= 1e-20 * rr0 {
            break;
        }
        let ap = apply(&p);
        let pap: f64 = p.iter().zip(ap.iter()).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        k.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        p = &r + &(&p * (rr_new / rr));
        rr = rr_new;
    }

    k.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
    let peak = k.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return current.clone();
    }
    let cut = opts.prune_fraction * peak;
    k.mapv_inplace(|v| if v >= cut { v } else { 0.0 });
    let k = recenter(&k);
    let s = k.sum();
    k / s
}

/// Integer shift that moves the kernel's centroid to the window center.
fn recenter(k: &Array2<f64>) -> Array2<f64> {
    let (r, c) = k.dim();
    let total = k.sum();
    let (mut my, mut mx) = (0.0, 0.0);
    for ((i, j), v) in k.indexed_iter() {
        my += i as f64 * v;
        mx += j as f64 * v;
    }
    let dy = (my / total).round() as isize - (r / 2) as isize;
    let dx = (mx / total).round() as isize - (c / 2) as isize;
    if dy == 0 && dx == 0 {
        return k.clone();
    }
    let mut out = Array2::zeros((r, c));
    for ((i, j), v) in k.indexed_iter() {
        let ni = i as isize - dy;
        let nj = j as isize - dx;
        if ni >= 0 && nj >= 0 && (ni as usize) < r && (nj as usize) < c {
            out[(ni as usize, nj as usize)] = *v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{image_measurement, ConvolutionMode, SceneImage};
    use crate::scenes::dead_leaves;

    #[test]
    fn delta_blur_gives_delta_kernel() {
        let scene = dead_leaves(128, 3);
        let y = image_measurement(&scene, &Psf::delta(9), 0.0, 0, ConvolutionMode::Circular).unwrap();
        let est = estimate_psf_blind(&y, 15, &BlindOptions::default()).unwrap();
        let k = est.psf.kernel();
        assert!((k.sum() - 1.0).abs() < 1e-12);
        assert!(k[(7, 7)] >= 0.99, "center mass {}", k[(7, 7)]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let zero = Measurement::new(Array2::zeros((64, 64)), 0.0).unwrap();
        assert!(estimate_psf_blind(&zero, 15, &BlindOptions::default()).is_err());
        let scene = SceneImage::new(Array2::from_elem((64, 64), 0.5)).unwrap();
        let y = image_measurement(&scene, &Psf::delta(3), 0.0, 0, ConvolutionMode::Circular).unwrap();
        assert!(estimate_psf_blind(&y, 16, &BlindOptions::default()).is_err());
        assert!(estimate_psf_blind(&y, 65, &BlindOptions::default()).is_err());
    }

    #[test]
    fn embed_extract_round_trip() {
        let k = Array2::from_shape_fn((5, 5), |(i, j)| (i * 5 + j) as f64);
        assert_eq!(extract(&embed(&k, (16, 16)), 5), k);
    }
}
