//! Wave-optics forward model: pupil fields, PSF formation and incoherent
//! image formation.
//!
//! Grids use the FFT-centered convention: for a side length `n` the optical
//! axis sits at index `n / 2`, and the point reflection used by
//! [`conjugate_flip`] maps index `i` to `(n - i) % n`. Index 0 is therefore
//! its own mirror image on even grids.

use ndarray::{s, Array2, ArrayView2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aperture::Aperture;
use crate::error::{ensure_same_shape, AoError, Result};
use crate::fft;

/// Default zero-padding factor applied before the pupil transform.
pub const DEFAULT_PAD_FACTOR: usize = 2;

/// Real-valued wavefront error in radians on the pupil grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMap {
    values: Array2<f64>,
}

impl PhaseMap {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(Array2::zeros((n, n)))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn add(&self, other: &PhaseMap) -> Result<PhaseMap> {
        ensure_same_shape(self.dim(), other.dim(), "phase addition")?;
        Ok(PhaseMap::new(&self.values + &other.values))
    }

    pub fn sub(&self, other: &PhaseMap) -> Result<PhaseMap> {
        ensure_same_shape(self.dim(), other.dim(), "phase subtraction")?;
        Ok(PhaseMap::new(&self.values - &other.values))
    }

    pub fn scaled(&self, k: f64) -> PhaseMap {
        PhaseMap::new(&self.values * k)
    }

    pub fn offset(&self, c: f64) -> PhaseMap {
        PhaseMap::new(&self.values + c)
    }

    /// RMS over samples where `weights > 0`, about zero (not mean-removed).
    pub fn rms_over(&self, support: &ArrayView2<f64>) -> f64 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for (v, w) in self.values.iter().zip(support.iter()) {
            if *w > 0.0 {
                acc += v * v;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            (acc / count as f64).sqrt()
        }
    }
}

/// Sampled complex field on a square power-of-two grid.
#[derive(Clone, Debug)]
pub struct ComplexField {
    grid: Array2<Complex64>,
    dx: f64,
}

impl ComplexField {
    pub fn new(grid: Array2<Complex64>, dx: f64) -> Result<Self> {
        let (r, c) = grid.dim();
        if r != c {
            return Err(AoError::Dimension(format!("field must be square, got {r}x{c}")));
        }
        if r < 8 || !r.is_power_of_two() {
            return Err(AoError::Dimension(format!(
                "field side must be a power of two >= 8, got {r}"
            )));
        }
        if grid.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(AoError::Argument("field contains non-finite values".into()));
        }
        Ok(Self { grid, dx })
    }

    pub fn grid(&self) -> &Array2<Complex64> {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.grid.nrows()
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn energy(&self) -> f64 {
        fft::energy(&self.grid.view())
    }
}

/// Nonnegative intensity kernel with its total energy.
#[derive(Clone, Debug, PartialEq)]
pub struct Psf {
    kernel: Array2<f64>,
    energy: f64,
}

impl Psf {
    pub fn new(kernel: Array2<f64>) -> Result<Self> {
        if kernel.is_empty() {
            return Err(AoError::Argument("empty PSF kernel".into()));
        }
        if kernel.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(AoError::Argument("PSF entries must be finite and nonnegative".into()));
        }
        let energy: f64 = kernel.sum();
        if energy <= 0.0 {
            return Err(AoError::Argument("PSF has zero energy".into()));
        }
        Ok(Self { kernel, energy })
    }

    /// Builds a PSF after clamping small negative round-off to zero.
    pub fn from_clamped(kernel: Array2<f64>) -> Result<Self> {
        Self::new(kernel.mapv(|v| if v > 0.0 { v } else { 0.0 }))
    }

    /// Single unit sample at the FFT center.
    pub fn delta(size: usize) -> Self {
        let mut k = Array2::zeros((size, size));
        k[(size / 2, size / 2)] = 1.0;
        Self { kernel: k, energy: 1.0 }
    }

    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn dim(&self) -> (usize, usize) {
        self.kernel.dim()
    }

    pub fn peak(&self) -> f64 {
        self.kernel.iter().cloned().fold(0.0, f64::max)
    }

    pub fn normalized(&self) -> Psf {
        Psf {
            kernel: &self.kernel / self.energy,
            energy: 1.0,
        }
    }

    /// Centered crop (or zero-pad) to `size x size`, keeping the FFT center
    /// aligned. The result is not renormalized.
    pub fn resized_centered(&self, size: usize) -> Result<Psf> {
        Psf::new(resize_centered(&self.kernel.view(), size, size))
    }
}

/// Copies `a` into a `rows x cols` grid so that `a`'s FFT center lands on
/// the output's FFT center. Cropping and zero-padding are both handled.
pub fn resize_centered(a: &ArrayView2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        let si = i as isize - (rows / 2) as isize + (ar / 2) as isize;
        if si < 0 || si >= ar as isize {
            continue;
        }
        for j in 0..cols {
            let sj = j as isize - (cols / 2) as isize + (ac / 2) as isize;
            if sj < 0 || sj >= ac as isize {
                continue;
            }
            out[(i, j)] = a[(si as usize, sj as usize)];
        }
    }
    out
}

fn resize_centered_complex(a: &ArrayView2<Complex64>, size: usize) -> Array2<Complex64> {
    let n = a.nrows();
    let mut out = Array2::zeros((size, size));
    if size >= n {
        let off = size / 2 - n / 2;
        out.slice_mut(s![off..off + n, off..off + n]).assign(a);
    } else {
        let off = n / 2 - size / 2;
        out.assign(&a.slice(s![off..off + size, off..off + size]));
    }
    out
}

/// Scene radiance in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pixels: Array2<f64>,
}

impl SceneImage {
    /// Values are clamped to `[0, 1]`; NaN maps to 0.
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(AoError::Argument("empty scene".into()));
        }
        let pixels = pixels.mapv(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }
}

/// Sensor measurement together with the noise level used to form it.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pixels: Array2<f64>,
    noise_sigma: f64,
}

impl Measurement {
    pub fn new(pixels: Array2<f64>, noise_sigma: f64) -> Result<Self> {
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(AoError::Argument("measurement must be finite and nonnegative".into()));
        }
        Ok(Self { pixels, noise_sigma })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Boundary handling for [`image_measurement`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvolutionMode {
    #[default]
    Circular,
    Linear,
}

/// `A ∘ exp(jφ)`.
pub fn pupil_function(aperture: &Aperture, phase: &PhaseMap) -> Result<ComplexField> {
    ensure_same_shape(aperture.dim(), phase.dim(), "pupil_function")?;
    let amp = aperture.amplitude();
    let mut grid = Array2::zeros(amp.dim());
    ndarray::Zip::from(&mut grid)
        .and(amp)
        .and(phase.values())
        .for_each(|g, &a, &p| {
            *g = if a > 0.0 {
                Complex64::from_polar(a, p)
            } else {
                Complex64::new(0.0, 0.0)
            };
        });
    ComplexField::new(grid, 1.0)
}

/// Zero-pads the pupil to `pad_factor * n` and returns `|F{pupil}|²` under the
/// centered unitary transform.
pub fn psf_from_pupil(pupil: &ComplexField, pad_factor: usize) -> Result<Psf> {
    if pad_factor == 0 {
        return Err(AoError::Argument("pad_factor must be >= 1".into()));
    }
    let padded = resize_centered_complex(&pupil.grid().view(), pupil.n() * pad_factor);
    let spectrum = fft::fft2_centered_unitary(&padded.view());
    Psf::new(spectrum.mapv(|z| z.norm_sqr()))
}

/// Convenience: PSF of `aperture` with `phase`.
pub fn psf(aperture: &Aperture, phase: &PhaseMap, pad_factor: usize) -> Result<Psf> {
    psf_from_pupil(&pupil_function(aperture, phase)?, pad_factor)
}

/// PSF of the bare aperture, `|F{A}|²`.
pub fn diffraction_limited_psf(aperture: &Aperture, pad_factor: usize) -> Result<Psf> {
    psf(aperture, &PhaseMap::zeros(aperture.n()), pad_factor)
}

/// PSF seen through the residual `phi_o + phi_slm`.
pub fn corrected_psf(
    aperture: &Aperture,
    phi_o: &PhaseMap,
    phi_slm: &PhaseMap,
    pad_factor: usize,
) -> Result<Psf> {
    let residual = phi_o.add(phi_slm)?;
    psf(aperture, &residual, pad_factor)
}

/// `φ'(x, y) = −φ(−x, −y)` with the reflection taken about the FFT center.
pub fn conjugate_flip(phase: &PhaseMap) -> PhaseMap {
    let v = phase.values();
    let (r, c) = v.dim();
    PhaseMap::new(Array2::from_shape_fn((r, c), |(i, j)| {
        -v[((r - i) % r, (c - j) % c)]
    }))
}

/// Relative L2 distance between the PSFs of `phase` and of its conjugate
/// flip. Zero for point-symmetric apertures.
pub fn flip_distance(aperture: &Aperture, phase: &PhaseMap, pad_factor: usize) -> Result<f64> {
    let a = psf(aperture, phase, pad_factor)?;
    let b = psf(aperture, &conjugate_flip(phase), pad_factor)?;
    Ok(relative_l2(&a.kernel().view(), &b.kernel().view()))
}

/// Point reflection about the FFT center, without negation.
pub fn point_reflect(a: &ArrayView2<f64>) -> Array2<f64> {
    let (r, c) = a.dim();
    Array2::from_shape_fn((r, c), |(i, j)| a[((r - i) % r, (c - j) % c)])
}

/// Places a centered kernel onto a `rows x cols` circular grid with its
/// center at index (0, 0), cropping it to the grid if needed.
fn wrap_kernel(kernel: &ArrayView2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (kr, kc) = kernel.dim();
    let mut out = Array2::zeros((rows, cols));
    for a in 0..kr {
        let di = a as isize - (kr / 2) as isize;
        if di < -((rows / 2) as isize) || di >= (rows - rows / 2) as isize {
            continue;
        }
        for b in 0..kc {
            let dj = b as isize - (kc / 2) as isize;
            if dj < -((cols / 2) as isize) || dj >= (cols - cols / 2) as isize {
                continue;
            }
            let i = di.rem_euclid(rows as isize) as usize;
            let j = dj.rem_euclid(cols as isize) as usize;
            out[(i, j)] += kernel[(a, b)];
        }
    }
    out
}

/// Kernel nonzeros up to which the direct (sparse) convolution is used.
const SPARSE_KERNEL_LIMIT: usize = 32;

/// Circular convolution of `x` with a centered kernel.
pub fn convolve_circular(x: &ArrayView2<f64>, kernel: &ArrayView2<f64>) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let nnz: Vec<(isize, isize, f64)> = kernel
        .indexed_iter()
        .filter(|(_, v)| **v != 0.0)
        .map(|((a, b), v)| {
            (
                a as isize - (kernel.nrows() / 2) as isize,
                b as isize - (kernel.ncols() / 2) as isize,
                *v,
            )
        })
        .collect();
    if nnz.len() <= SPARSE_KERNEL_LIMIT && kernel.nrows() <= rows && kernel.ncols() <= cols {
        let mut out = Array2::zeros((rows, cols));
        for &(di, dj, w) in &nnz {
            for i in 0..rows {
                let si = (i as isize - di).rem_euclid(rows as isize) as usize;
                for j in 0..cols {
                    let sj = (j as isize - dj).rem_euclid(cols as isize) as usize;
                    out[(i, j)] += w * x[(si, sj)];
                }
            }
        }
        return out;
    }
    let k = wrap_kernel(kernel, rows, cols);
    let fx = fft::fft2_real(x);
    let fk = fft::fft2_real(&k.view());
    fft::ifft2_real(&(&fx * &fk))
}

/// Linear ("same"-size, zero boundary) convolution with a centered kernel.
pub fn convolve_linear(x: &ArrayView2<f64>, kernel: &ArrayView2<f64>) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let (kr, kc) = kernel.dim();
    let pr = rows + kr;
    let pc = cols + kc;
    let mut padded = Array2::zeros((pr, pc));
    padded.slice_mut(s![..rows, ..cols]).assign(x);
    let full = convolve_circular(&padded.view(), kernel);
    // Wrapped contributions land in the zero margin, so the top-left block
    // is the zero-boundary result.
    full.slice(s![..rows, ..cols]).to_owned()
}

/// `Y = X ⊛ H + ε` with the kernel normalized to unit energy and ε i.i.d.
/// Gaussian. Negative readings are clamped to zero.
pub fn image_measurement(
    scene: &SceneImage,
    psf: &Psf,
    noise_sigma: f64,
    seed: u64,
    mode: ConvolutionMode,
) -> Result<Measurement> {
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(AoError::Argument(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let unit = psf.normalized();
    let x = scene.pixels().view();
    let (rows, cols) = x.dim();
    // Crop oversized kernels to the scene before convolving.
    let kernel = if unit.dim().0 > rows || unit.dim().1 > cols {
        let k = resize_centered(&unit.kernel().view(), unit.dim().0.min(rows), unit.dim().1.min(cols));
        let e = k.sum();
        if e > 0.0 {
            k / e
        } else {
            k
        }
    } else {
        unit.kernel().clone()
    };
    let mut y = match mode {
        ConvolutionMode::Circular => convolve_circular(&x, &kernel.view()),
        ConvolutionMode::Linear => convolve_linear(&x, &kernel.view()),
    };
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        y.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    y.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
    Measurement::new(y, noise_sigma)
}

/// Relative L2 distance `‖a − b‖ / ‖a‖`.
pub fn relative_l2(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        num += (x - y) * (x - y);
        den += x * x;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
