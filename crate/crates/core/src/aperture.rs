//! Aperture masks, point-symmetry classification and checkerboard
//! amplitude encoding for phase-only modulators.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, AoError, Result};
use crate::fft;
use crate::optics::{point_reflect, PhaseMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeTag {
    Disk,
    Rectangle,
    Triangle,
    Bitmap,
}

impl fmt::Display for ShapeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeTag::Disk => "disk",
            ShapeTag::Rectangle => "rectangle",
            ShapeTag::Triangle => "triangle",
            ShapeTag::Bitmap => "bitmap",
        };
        f.write_str(s)
    }
}

impl FromStr for ShapeTag {
    type Err = AoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "disk" | "circle" => Ok(ShapeTag::Disk),
            "rectangle" | "rect" => Ok(ShapeTag::Rectangle),
            "triangle" => Ok(ShapeTag::Triangle),
            "bitmap" => Ok(ShapeTag::Bitmap),
            other => Err(AoError::Argument(format!("unknown aperture shape '{other}'"))),
        }
    }
}

/// Amplitude mask in `[0, 1]` on a square grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Aperture {
    amplitude: Array2<f64>,
    shape_tag: ShapeTag,
    fill_count: usize,
    diameter: f64,
}

/// Tolerance used when an aperture's symmetry decides ambiguity flags.
pub const SYMMETRY_TOL: f64 = 1e-12;

impl Aperture {
    /// Wraps an arbitrary amplitude mask. Values are clamped to `[0, 1]`.
    pub fn from_bitmap(amplitude: Array2<f64>) -> Result<Self> {
        let amplitude = amplitude.mapv(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::build(amplitude, ShapeTag::Bitmap, None)
    }

    fn build(amplitude: Array2<f64>, shape_tag: ShapeTag, diameter: Option<f64>) -> Result<Self> {
        let (r, c) = amplitude.dim();
        if r != c || r < 8 {
            return Err(AoError::Dimension(format!("aperture must be square >= 8, got {r}x{c}")));
        }
        let n = r;
        let fill_count = amplitude.iter().filter(|v| **v > 0.0).count();
        if fill_count == 0 {
            return Err(AoError::Argument("aperture has empty support".into()));
        }
        let (lo, hi) = (n / 4, n - n / 4);
        let mut max_r2: f64 = 0.0;
        for ((i, j), v) in amplitude.indexed_iter() {
            if *v > 0.0 {
                if i < lo || i > hi || j < lo || j > hi {
                    return Err(AoError::Argument(
                        "aperture support must lie within the central half of the grid".into(),
                    ));
                }
                let y = i as f64 - (n / 2) as f64;
                let x = j as f64 - (n / 2) as f64;
                max_r2 = max_r2.max(x * x + y * y);
            }
        }
        let diameter = diameter.unwrap_or(2.0 * max_r2.sqrt());
        Ok(Self {
            amplitude,
            shape_tag,
            fill_count,
            diameter,
        })
    }

    pub fn amplitude(&self) -> &Array2<f64> {
        &self.amplitude
    }

    pub fn shape_tag(&self) -> ShapeTag {
        self.shape_tag
    }

    pub fn fill_count(&self) -> usize {
        self.fill_count
    }

    /// Diameter of the circumscribing circle, in samples.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn n(&self) -> usize {
        self.amplitude.nrows()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.amplitude.dim()
    }

    /// `Σ A²`, the pupil energy of the bare aperture.
    pub fn energy(&self) -> f64 {
        self.amplitude.iter().map(|a| a * a).sum()
    }

    pub fn in_support(&self, i: usize, j: usize) -> bool {
        self.amplitude[(i, j)] > 0.0
    }

    /// Indicator of the support as a 0/1 array.
    pub fn support(&self) -> Array2<f64> {
        self.amplitude.mapv(|a| if a > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn is_point_symmetric(&self, tol: f64) -> bool {
        is_point_symmetric(self, tol)
    }

    /// The aperture OR'd with its own point reflection.
    pub fn symmetrized(&self) -> Result<Aperture> {
        let flipped = point_reflect(&self.amplitude.view());
        let amp = ndarray::Zip::from(&self.amplitude)
            .and(&flipped)
            .map_collect(|a, b| a.max(*b));
        Self::build(amp, ShapeTag::Bitmap, None)
    }
}

/// Builds a centered aperture inscribed in a circle of diameter
/// `size_fraction * grid_n`.
///
/// The rectangle has a 2:1 aspect ratio (landscape) and the triangle is
/// equilateral with its apex toward row 0 and its centroid on the grid
/// center. `size_fraction` must be at most 0.5 so the support stays inside
/// the central half of the grid.
pub fn make_aperture(shape_tag: ShapeTag, grid_n: usize, size_fraction: f64) -> Result<Aperture> {
    if !(size_fraction > 0.0 && size_fraction <= 0.5) {
        return Err(AoError::Argument(format!(
            "size_fraction must be in (0, 0.5], got {size_fraction}"
        )));
    }
    if grid_n < 8 {
        return Err(AoError::Argument(format!("grid must be >= 8, got {grid_n}")));
    }
    let radius = size_fraction * grid_n as f64 / 2.0;
    let c = (grid_n / 2) as f64;
    let inside: Box<dyn Fn(f64, f64) -> bool> = match shape_tag {
        ShapeTag::Disk => Box::new(move |x, y| x * x + y * y <= radius * radius),
        ShapeTag::Rectangle => {
            // Inscribed 2:1 rectangle: half-diagonal equals the radius.
            let hw = radius * 2.0 / 5f64.sqrt();
            let hh = radius / 5f64.sqrt();
            Box::new(move |x, y| x.abs() <= hw && y.abs() <= hh)
        }
        ShapeTag::Triangle => {
            // Apex at (0, -R); base at y = R/2. Rows grow downward.
            let s3 = 3f64.sqrt();
            Box::new(move |x, y| {
                y <= radius / 2.0 && s3 * x - y <= radius && -s3 * x - y <= radius
            })
        }
        ShapeTag::Bitmap => {
            return Err(AoError::Argument(
                "bitmap apertures are loaded with Aperture::from_bitmap".into(),
            ))
        }
    };
    let amplitude = Array2::from_shape_fn((grid_n, grid_n), |(i, j)| {
        let y = i as f64 - c;
        let x = j as f64 - c;
        if inside(x, y) {
            1.0
        } else {
            0.0
        }
    });
    Aperture::build(amplitude, shape_tag, Some(2.0 * radius))
}

/// True iff `max |A(x,y) − A(−x,−y)| ≤ tol` under the FFT-center reflection.
pub fn is_point_symmetric(aperture: &Aperture, tol: f64) -> bool {
    let a = aperture.amplitude();
    let flipped = point_reflect(&a.view());
    a.iter()
        .zip(flipped.iter())
        .all(|(x, y)| (x - y).abs() <= tol)
}

/// Adds a one-pixel checkerboard of depth `checker_amplitude` outside the
/// aperture support: samples with odd `i + j` get `+checker_amplitude`,
/// even samples are untouched. At depth π neighbouring samples cancel and the
/// blocked light is pushed to the corners of the Fourier plane.
pub fn checkerboard_encode(
    aperture: &Aperture,
    slm_phase: &PhaseMap,
    checker_amplitude: f64,
) -> Result<PhaseMap> {
    checkerboard_encode_support(&aperture.amplitude().view(), slm_phase, checker_amplitude)
}

/// [`checkerboard_encode`] against a raw amplitude mask, which may cover the
/// whole grid.
pub fn checkerboard_encode_support(
    support: &ArrayView2<f64>,
    slm_phase: &PhaseMap,
    checker_amplitude: f64,
) -> Result<PhaseMap> {
    if !(checker_amplitude > 0.0 && checker_amplitude <= std::f64::consts::PI) {
        return Err(AoError::Argument(format!(
            "checker amplitude must be in (0, pi], got {checker_amplitude}"
        )));
    }
    ensure_same_shape(support.dim(), slm_phase.dim(), "checkerboard_encode")?;
    let mut out = slm_phase.values().clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        if support[(i, j)] <= 0.0 && (i + j) % 2 == 1 {
            *v += checker_amplitude;
        }
    }
    Ok(PhaseMap::new(out))
}

/// Energy of the quarter-band low-passed field `exp(jψ)` that lands outside
/// the aperture support. The low-pass keeps `|k| < n/8` on both axes,
/// standing in for a Fourier-plane stop.
pub fn lowpass_leakage(aperture: &Aperture, slm_phase: &PhaseMap) -> Result<f64> {
    ensure_same_shape(aperture.dim(), slm_phase.dim(), "lowpass_leakage")?;
    let n = aperture.n();
    let field = slm_phase.values().mapv(|p| Complex64::from_polar(1.0, p));
    let mut spec = fft::fft2_centered_unitary(&field.view());
    let c = (n / 2) as isize;
    let cutoff = (n / 8) as isize;
    for ((i, j), z) in spec.indexed_iter_mut() {
        let ki = i as isize - c;
        let kj = j as isize - c;
        if ki.abs() >= cutoff || kj.abs() >= cutoff {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    let filtered = fft::ifft2_centered_unitary(&spec.view());
    Ok(filtered
        .indexed_iter()
        .filter(|((i, j), _)| !aperture.in_support(*i, *j))
        .map(|(_, z)| z.norm_sqr())
        .sum())
}

/// Leakage of the encoded pattern relative to the unencoded one.
pub fn checkerboard_suppression_ratio(
    aperture: &Aperture,
    slm_phase: &PhaseMap,
    checker_amplitude: f64,
) -> Result<f64> {
    let encoded = checkerboard_encode(aperture, slm_phase, checker_amplitude)?;
    let base = lowpass_leakage(aperture, slm_phase)?;
    let enc = lowpass_leakage(aperture, &encoded)?;
    Ok(if base > 0.0 { enc / base } else { 0.0 })
}

/// Number of support samples, for callers holding only a view.
pub fn support_count(amplitude: &ArrayView2<f64>) -> usize {
    amplitude.iter().filter(|v| **v > 0.0).count()
}
