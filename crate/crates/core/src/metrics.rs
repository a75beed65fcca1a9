//! Image- and wavefront-quality metrics.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::aperture::Aperture;
use crate::error::{ensure_same_shape, AoError, Result};
use crate::fft;
use crate::optics::{diffraction_limited_psf, PhaseMap, Psf};

/// Peak-to-energy ratio of the diffraction-limited PSF for one aperture and
/// padding, reused across many Strehl evaluations.
#[derive(Clone, Debug)]
pub struct StrehlReference {
    pad_factor: usize,
    n: usize,
    peak_fraction: f64,
}

impl StrehlReference {
    pub fn new(aperture: &Aperture, pad_factor: usize) -> Result<Self> {
        let bare = diffraction_limited_psf(aperture, pad_factor)?;
        Ok(Self {
            pad_factor,
            n: aperture.n(),
            peak_fraction: bare.peak() / bare.energy(),
        })
    }

    /// Energy-equalized peak ratio.
    pub fn strehl(&self, psf: &Psf) -> Result<f64> {
        let side = self.n * self.pad_factor;
        ensure_same_shape(psf.dim(), (side, side), "strehl_ratio")?;
        Ok(psf.peak() / psf.energy() / self.peak_fraction)
    }
}

/// `max(psf) / max(psf of bare aperture)` after equalizing total energy. The
/// padding factor is inferred from the PSF size.
pub fn strehl_ratio(psf: &Psf, aperture: &Aperture) -> Result<f64> {
    let (r, c) = psf.dim();
    let n = aperture.n();
    if r != c || r % n != 0 {
        return Err(AoError::Dimension(format!(
            "PSF of {r}x{c} is not a padded {n}x{n} aperture grid"
        )));
    }
    StrehlReference::new(aperture, r / n)?.strehl(psf)
}

/// Maréchal estimate `exp(−σ²)` from a residual RMS in radians.
pub fn marechal_strehl(rms: f64) -> f64 {
    (-rms * rms).exp()
}

/// Radially averaged MTF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtfProfile {
    /// Cycles per aperture width.
    pub radial_frequency: Vec<f64>,
    pub contrast: Vec<f64>,
}

/// `|F{psf}|` normalized to 1 at DC and averaged over annuli one FFT bin
/// wide. A lag of `k` bins is `k` pupil samples, so dividing by the aperture
/// width in samples gives cycles per aperture width.
pub fn mtf(psf: &Psf, aperture_width_px: f64) -> Result<MtfProfile> {
    if !(aperture_width_px > 0.0) {
        return Err(AoError::Argument("aperture width must be positive".into()));
    }
    let (r, c) = psf.dim();
    let otf = fft::fft2_real(&psf.kernel().view());
    let dc = otf[(0, 0)].norm();
    let nbins = r.min(c) / 2 + 1;
    let mut sum = vec![0.0; nbins];
    let mut count = vec![0usize; nbins];
    for ((i, j), z) in otf.indexed_iter() {
        let ki = if i <= r / 2 { i as f64 } else { i as f64 - r as f64 };
        let kj = if j <= c / 2 { j as f64 } else { j as f64 - c as f64 };
        let b = (ki * ki + kj * kj).sqrt().round() as usize;
        if b < nbins {
            sum[b] += z.norm() / dc;
            count[b] += 1;
        }
    }
    let mut radial_frequency = Vec::with_capacity(nbins);
    let mut contrast = Vec::with_capacity(nbins);
    for b in 0..nbins {
        if count[b] > 0 {
            radial_frequency.push(b as f64 / aperture_width_px);
            contrast.push(sum[b] / count[b] as f64);
        }
    }
    contrast[0] = 1.0;
    Ok(MtfProfile {
        radial_frequency,
        contrast,
    })
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(a: &ArrayView2<f64>, b: &ArrayView2<f64>, peak: f64) -> Result<f64> {
    ensure_same_shape(a.dim(), b.dim(), "psnr")?;
    if a.is_empty() {
        return Err(AoError::Argument("psnr of empty images".into()));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering.
fn filter_valid(a: &ArrayView2<f64>, taps: &[f64]) -> Array2<f64> {
    let (r, c) = a.dim();
    let w = taps.len();
    let (orows, ocols) = (r + 1 - w, c + 1 - w);
    let mut tmp = Array2::<f64>::zeros((r, ocols));
    for i in 0..r {
        for j in 0..ocols {
            tmp[(i, j)] = (0..w).map(|k| taps[k] * a[(i, j + k)]).sum();
        }
    }
    let mut out = Array2::zeros((orows, ocols));
    for i in 0..orows {
        for j in 0..ocols {
            out[(i, j)] = (0..w).map(|k| taps[k] * tmp[(i + k, j)]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained Gaussian windows.
pub fn ssim(a: &ArrayView2<f64>, b: &ArrayView2<f64>, params: SsimParams) -> Result<f64> {
    ensure_same_shape(a.dim(), b.dim(), "ssim")?;
    let (r, c) = a.dim();
    if r < params.window || c < params.window || params.window == 0 {
        return Err(AoError::Argument(format!(
            "images of {r}x{c} are smaller than the {} window",
            params.window
        )));
    }
    let taps = gaussian_taps(params.window, params.sigma);
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let aa = filter_valid(&(a * a).view(), &taps);
    let bb = filter_valid(&(b * b).view(), &taps);
    let ab = filter_valid(&(a * b).view(), &taps);
    let mut acc = 0.0;
    for idx in 0..mu_a.len() {
        let (i, j) = (idx / mu_a.ncols(), idx % mu_a.ncols());
        let ma = mu_a[(i, j)];
        let mb = mu_b[(i, j)];
        let va = aa[(i, j)] - ma * ma;
        let vb = bb[(i, j)] - mb * mb;
        let cov = ab[(i, j)] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / mu_a.len() as f64)
}

/// Mean squared forward-gradient discrepancy over in-mask pairs, x and y
/// terms averaged separately and summed. Piston differences cancel.
pub fn gradient_phase_error(est: &PhaseMap, gt: &PhaseMap, mask: &Aperture) -> Result<f64> {
    ensure_same_shape(est.dim(), gt.dim(), "gradient_phase_error")?;
    ensure_same_shape(est.dim(), mask.dim(), "gradient_phase_error")?;
    gradient_error_on(&est.values().view(), &gt.values().view(), &mask.amplitude().view())
}

pub(crate) fn gradient_error_on(
    est: &ArrayView2<f64>,
    gt: &ArrayView2<f64>,
    support: &ArrayView2<f64>,
) -> Result<f64> {
    let d = est - gt;
    let (r, c) = d.dim();
    let (mut sx, mut nx, mut sy, mut ny) = (0.0, 0usize, 0.0, 0usize);
    let mut any = false;
    for i in 0..r {
        for j in 0..c {
            if support[(i, j)] <= 0.0 {
                continue;
            }
            any = true;
            if j + 1 < c && support[(i, j + 1)] > 0.0 {
                let g = d[(i, j + 1)] - d[(i, j)];
                sx += g * g;
                nx += 1;
            }
            if i + 1 < r && support[(i + 1, j)] > 0.0 {
                let g = d[(i + 1, j)] - d[(i, j)];
                sy += g * g;
                ny += 1;
            }
        }
    }
    if !any {
        return Err(AoError::Argument("gradient error over an empty mask".into()));
    }
    let mx = if nx > 0 { sx / nx as f64 } else { 0.0 };
    let my = if ny > 0 { sy / ny as f64 } else { 0.0 };
    Ok(mx + my)
}

/// Normalized cross-correlation of two equally sized kernels, maximized
/// over integer translations of `b` by up to `max_shift` samples (samples
/// shifted in from outside count as zero). Kernels are mean-subtracted.
pub fn kernel_ncc(a: &ArrayView2<f64>, b: &ArrayView2<f64>, max_shift: usize) -> Result<f64> {
    ensure_same_shape(a.dim(), b.dim(), "kernel_ncc")?;
    let (r, c) = a.dim();
    let ma = a.mean().unwrap_or(0.0);
    let mb = b.mean().unwrap_or(0.0);
    let da = a.mapv(|v| v - ma);
    let na = da.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = max_shift as isize;
    let mut best = f64::NEG_INFINITY;
    for dy in -s..=s {
        for dx in -s..=s {
            let (mut num, mut nb) = (0.0, 0.0);
            for i in 0..r {
                for j in 0..c {
                    let (si, sj) = (i as isize + dy, j as isize + dx);
                    let bv = if si >= 0 && sj >= 0 && (si as usize) < r && (sj as usize) < c {
                        b[(si as usize, sj as usize)]
                    } else {
                        0.0
                    } - mb;
                    num += da[(i, j)] * bv;
                    nb += bv * bv;
                }
            }
            let denom = na * nb.sqrt();
            if denom > 0.0 {
                best = best.max(num / denom);
            }
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(AoError::Argument("kernel_ncc of a constant kernel".into()))
    }
}
