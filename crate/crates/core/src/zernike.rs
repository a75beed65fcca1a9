//! Zernike aberration basis over a disk centered on the pupil grid.
//!
//! Modes are RMS-normalized (`sqrt(2(n+1))` for `m != 0`, `sqrt(n+1)` for
//! `m == 0`) so the 2-norm of a coefficient vector equals the wavefront RMS
//! over the disk. Modes are labelled sequentially in OSA/ANSI order with the
//! piston term left out. After sampling, the modes are re-orthonormalized
//! over the discrete disk so the Gram matrix is the identity on the grid.
//!
//! The disk radius is `disk_radius_fraction * grid_n / 4`, i.e. a fraction of
//! the central half-grid that apertures are confined to, so the default 0.9
//! circumscribes every built-in aperture of size fraction 0.4.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aperture::Aperture;
use crate::error::{ensure_same_shape, AoError, Result};
use crate::optics::PhaseMap;

/// Which modes make up a basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ModeSelection {
    /// All modes with `1 <= n <= max` radial order.
    RadialOrder(u32),
    /// The first `count` non-piston modes in sequential order.
    FirstModes(usize),
}

/// Serializable description of a basis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub grid_n: usize,
    pub disk_radius_fraction: f64,
    pub selection: ModeSelection,
}

impl BasisSpec {
    pub fn radius_px(&self) -> f64 {
        self.disk_radius_fraction * self.grid_n as f64 / 4.0
    }
}

/// `(n, m)` pairs with `1 <= n`, in OSA order.
pub fn mode_indices(selection: ModeSelection) -> Vec<(i32, i32)> {
    let mut out = Vec::new();
    let mut n = 1;
    loop {
        for m in (-n..=n).step_by(2) {
            out.push((n, m));
            if let ModeSelection::FirstModes(count) = selection {
                if out.len() == count {
                    return out;
                }
            }
        }
        if let ModeSelection::RadialOrder(max) = selection {
            if n as u32 >= max {
                return out;
            }
        }
        n += 1;
    }
}

fn factorial(k: i32) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Radial polynomial `R_n^|m|(ρ)`.
pub fn radial(n: i32, m: i32, rho: f64) -> f64 {
    let m = m.abs();
    if (n - m) % 2 != 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for k in 0..=((n - m) / 2) {
        let num = if k % 2 == 0 { 1.0 } else { -1.0 } * factorial(n - k);
        let den = factorial(k) * factorial((n + m) / 2 - k) * factorial((n - m) / 2 - k);
        acc += num / den * rho.powi(n - 2 * k);
    }
    acc
}

/// RMS-normalized Zernike polynomial at polar coordinates on the unit disk.
pub fn zernike(n: i32, m: i32, rho: f64, theta: f64) -> f64 {
    let norm = if m == 0 {
        ((n + 1) as f64).sqrt()
    } else {
        (2.0 * (n + 1) as f64).sqrt()
    };
    let r = radial(n, m, rho);
    if m > 0 {
        norm * r * (m as f64 * theta).cos()
    } else if m < 0 {
        norm * r * ((-m) as f64 * theta).sin()
    } else {
        norm * r
    }
}

/// Samples modes on a `len x len` grid whose center index `len / 2` is the
/// optical axis, with `spacing` pupil pixels per sample and disk radius
/// `radius_px` pupil pixels. Samples outside the disk are zero.
pub fn sample_modes(
    indices: &[(i32, i32)],
    len: usize,
    spacing: f64,
    radius_px: f64,
) -> (Vec<Array2<f64>>, Array2<f64>) {
    let c = (len / 2) as f64;
    let mut mask = Array2::zeros((len, len));
    let mut polar = Vec::with_capacity(len * len);
    for i in 0..len {
        for j in 0..len {
            let x = (j as f64 - c) * spacing / radius_px;
            // Rows grow downward; the y axis points up.
            let y = -(i as f64 - c) * spacing / radius_px;
            let rho = (x * x + y * y).sqrt();
            if rho <= 1.0 {
                mask[(i, j)] = 1.0;
                polar.push((i, j, rho, y.atan2(x)));
            }
        }
    }
    let modes = indices
        .iter()
        .map(|&(n, m)| {
            let mut a = Array2::zeros((len, len));
            for &(i, j, rho, theta) in &polar {
                a[(i, j)] = zernike(n, m, rho, theta);
            }
            a
        })
        .collect();
    (modes, mask)
}

/// Zernike modes sampled over a disk on the pupil grid.
#[derive(Clone, Debug)]
pub struct ZernikeBasis {
    spec: BasisSpec,
    indices: Vec<(i32, i32)>,
    modes: Vec<Array2<f64>>,
    mask: Array2<f64>,
    /// Flat indices of mask samples.
    mask_samples: Vec<(usize, usize)>,
    /// Cholesky factor of the normal matrix of `[1, Z_1..Z_K]` over the mask.
    normal: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Coefficients against a specific basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZernikeCoeffs {
    pub values: Vec<f64>,
    pub basis_id: String,
}

impl ZernikeCoeffs {
    pub fn zeros(basis: &ZernikeBasis) -> Self {
        Self {
            values: vec![0.0; basis.len()],
            basis_id: basis.id(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * k).collect(),
            basis_id: self.basis_id.clone(),
        }
    }
}

/// All modes with `1 <= n <= max_radial_order` over a disk of radius
/// `disk_radius_fraction * grid_n / 4`.
pub fn build_basis(
    grid_n: usize,
    disk_radius_fraction: f64,
    max_radial_order: u32,
) -> Result<ZernikeBasis> {
    if max_radial_order < 1 {
        return Err(AoError::Argument("max_radial_order must be >= 1".into()));
    }
    ZernikeBasis::new(BasisSpec {
        grid_n,
        disk_radius_fraction,
        selection: ModeSelection::RadialOrder(max_radial_order),
    })
}

impl ZernikeBasis {
    pub fn new(spec: BasisSpec) -> Result<Self> {
        if !(spec.disk_radius_fraction > 0.0 && spec.disk_radius_fraction <= 1.0) {
            return Err(AoError::Argument(format!(
                "disk radius fraction must be in (0, 1], got {}",
                spec.disk_radius_fraction
            )));
        }
        if spec.grid_n < 8 {
            return Err(AoError::Argument(format!("grid must be >= 8, got {}", spec.grid_n)));
        }
        match spec.selection {
            ModeSelection::RadialOrder(0) | ModeSelection::FirstModes(0) => {
                return Err(AoError::Argument("basis needs at least one mode".into()))
            }
            _ => {}
        }
        let indices = mode_indices(spec.selection);
        let (mut modes, mask) = sample_modes(&indices, spec.grid_n, 1.0, spec.radius_px());
        let mask_samples: Vec<(usize, usize)> = mask
            .indexed_iter()
            .filter(|(_, v)| **v > 0.0)
            .map(|(ij, _)| ij)
            .collect();
        orthonormalize(&mut modes, &mask_samples)?;
        let design = design_matrix(&modes, &mask_samples);
        let normal = (design.transpose() * &design)
            .cholesky()
            .ok_or_else(|| AoError::Argument("Zernike modes are degenerate on this grid".into()))?;
        Ok(Self {
            spec,
            indices,
            modes,
            mask,
            mask_samples,
            normal,
        })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn id(&self) -> String {
        let sel = match self.spec.selection {
            ModeSelection::RadialOrder(n) => format!("order{n}"),
            ModeSelection::FirstModes(k) => format!("modes{k}"),
        };
        format!("zernike-n{}-r{}-{}", self.spec.grid_n, self.spec.disk_radius_fraction, sel)
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn grid_n(&self) -> usize {
        self.spec.grid_n
    }

    pub fn radius_px(&self) -> f64 {
        self.spec.radius_px()
    }

    pub fn indices(&self) -> &[(i32, i32)] {
        &self.indices
    }

    pub fn modes(&self) -> &[Array2<f64>] {
        &self.modes
    }

    pub fn mask(&self) -> &Array2<f64> {
        &self.mask
    }

    /// Position of mode `(n, m)` in the basis.
    pub fn position(&self, n: i32, m: i32) -> Option<usize> {
        self.indices.iter().position(|&p| p == (n, m))
    }

    /// Mask-normalized inner products `⟨Z_i, Z_j⟩`.
    pub fn gram(&self) -> Array2<f64> {
        let k = self.len();
        let area = self.mask_samples.len() as f64;
        let mut g = Array2::zeros((k, k));
        for a in 0..k {
            for b in a..k {
                let v: f64 = self
                    .mask_samples
                    .iter()
                    .map(|&ij| self.modes[a][ij] * self.modes[b][ij])
                    .sum::<f64>()
                    / area;
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        g
    }

    fn check(&self, coeffs: &ZernikeCoeffs) -> Result<()> {
        if coeffs.values.len() != self.len() {
            return Err(AoError::Dimension(format!(
                "coefficient count {} does not match basis size {}",
                coeffs.values.len(),
                self.len()
            )));
        }
        if coeffs.basis_id != self.id() {
            return Err(AoError::Dimension(format!(
                "coefficients belong to basis '{}', not '{}'",
                coeffs.basis_id,
                self.id()
            )));
        }
        Ok(())
    }

    /// `φ = Σ c_k Z_k`.
    pub fn phase_from_coeffs(&self, coeffs: &ZernikeCoeffs) -> Result<PhaseMap> {
        self.check(coeffs)?;
        Ok(PhaseMap::new(self.combine(&coeffs.values)))
    }

    pub(crate) fn combine(&self, values: &[f64]) -> Array2<f64> {
        let n = self.grid_n();
        let mut out = Array2::zeros((n, n));
        for (c, mode) in values.iter().zip(&self.modes) {
            if *c != 0.0 {
                out.scaled_add(*c, mode);
            }
        }
        out
    }

    /// Least-squares projection over the disk. A piston column is fitted
    /// alongside the modes and discarded.
    pub fn fit_coeffs(&self, phase: &PhaseMap) -> Result<ZernikeCoeffs> {
        let n = self.grid_n();
        ensure_same_shape(phase.dim(), (n, n), "fit_coeffs")?;
        let v = phase.values();
        let k = self.len();
        let mut rhs = DVector::zeros(k + 1);
        for &ij in &self.mask_samples {
            let p = v[ij];
            rhs[0] += p;
            for (a, mode) in self.modes.iter().enumerate() {
                rhs[a + 1] += mode[ij] * p;
            }
        }
        let sol = self.normal.solve(&rhs);
        Ok(ZernikeCoeffs {
            values: sol.iter().skip(1).cloned().collect(),
            basis_id: self.id(),
        })
    }

    /// Weighted least-squares fit restricted to `weights > 0` (e.g. an
    /// aperture support), with a piston column.
    pub fn fit_coeffs_weighted(
        &self,
        phase: &PhaseMap,
        weights: &ArrayView2<f64>,
    ) -> Result<ZernikeCoeffs> {
        let n = self.grid_n();
        ensure_same_shape(phase.dim(), (n, n), "fit_coeffs_weighted")?;
        ensure_same_shape(weights.dim(), (n, n), "fit_coeffs_weighted")?;
        let samples: Vec<(usize, usize)> = weights
            .indexed_iter()
            .filter(|(_, w)| **w > 0.0)
            .map(|(ij, _)| ij)
            .collect();
        let k = self.len();
        let mut normal = DMatrix::zeros(k + 1, k + 1);
        let mut rhs = DVector::zeros(k + 1);
        let mut row = vec![0.0; k + 1];
        for &ij in &samples {
            let w = weights[ij];
            row[0] = 1.0;
            for (a, mode) in self.modes.iter().enumerate() {
                row[a + 1] = mode[ij];
            }
            let p = phase.values()[ij];
            for a in 0..=k {
                rhs[a] += w * row[a] * p;
                for b in a..=k {
                    normal[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..=k {
            for b in 0..a {
                normal[(a, b)] = normal[(b, a)];
            }
        }
        let sol = solve_spd(normal, rhs)?;
        Ok(ZernikeCoeffs {
            values: sol.iter().skip(1).cloned().collect(),
            basis_id: self.id(),
        })
    }

    /// Root-sum-square of the even-`n` and odd-`n` coefficient groups.
    /// Even-`n` modes are the ones [`crate::optics::conjugate_flip`] negates.
    pub fn parity_split(&self, coeffs: &ZernikeCoeffs) -> (f64, f64) {
        let mut even = 0.0;
        let mut odd = 0.0;
        for (&(n, _), c) in self.indices.iter().zip(&coeffs.values) {
            if n % 2 == 0 {
                even += c * c;
            } else {
                odd += c * c;
            }
        }
        (even.sqrt(), odd.sqrt())
    }
}

/// Modified Gram-Schmidt over the mask samples, in basis order, against a
/// leading piston vector. Each mode keeps unit mean square over the mask.
/// The sampled analytic modes drift from orthonormality at the disk edge
/// (about 1e-2 at a 58-pixel radius); this removes that drift.
fn orthonormalize(modes: &mut [Array2<f64>], samples: &[(usize, usize)]) -> Result<()> {
    let area = samples.len() as f64;
    let mut done: Vec<Vec<f64>> = vec![vec![1.0; samples.len()]];
    for mode in modes.iter_mut() {
        let mut v: Vec<f64> = samples.iter().map(|&ij| mode[ij]).collect();
        for q in &done {
            let proj = v.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / area;
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
        }
        let ms = v.iter().map(|a| a * a).sum::<f64>() / area;
        if ms < 1e-12 {
            return Err(AoError::Argument("Zernike modes are degenerate on this grid".into()));
        }
        let k = 1.0 / ms.sqrt();
        v.iter_mut().for_each(|a| *a *= k);
        for (&ij, a) in samples.iter().zip(&v) {
            mode[ij] = *a;
        }
        done.push(v);
    }
    Ok(())
}

fn design_matrix(modes: &[Array2<f64>], samples: &[(usize, usize)]) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(samples.len(), modes.len() + 1);
    for (r, &ij) in samples.iter().enumerate() {
        d[(r, 0)] = 1.0;
        for (a, mode) in modes.iter().enumerate() {
            d[(r, a + 1)] = mode[ij];
        }
    }
    d
}

/// Solves a symmetric positive (semi)definite system, falling back to a
/// small ridge when the Cholesky factorization fails.
pub(crate) fn solve_spd(normal: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = normal.clone().cholesky() {
        return Ok(ch.solve(&rhs));
    }
    let scale = (0..normal.nrows()).map(|i| normal[(i, i)]).fold(0.0, f64::max).max(1e-300);
    let ridge = DMatrix::identity(normal.nrows(), normal.ncols()) * (scale * 1e-10);
    (normal + ridge)
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or_else(|| AoError::Argument("singular least-squares system".into()))
}

/// Free-function form of [`ZernikeBasis::phase_from_coeffs`].
pub fn phase_from_coeffs(coeffs: &ZernikeCoeffs, basis: &ZernikeBasis) -> Result<PhaseMap> {
    basis.phase_from_coeffs(coeffs)
}

/// Free-function form of [`ZernikeBasis::fit_coeffs`].
pub fn fit_coeffs(phase: &PhaseMap, basis: &ZernikeBasis) -> Result<ZernikeCoeffs> {
    basis.fit_coeffs(phase)
}

/// Options for random aberration draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub rms_target: f64,
    /// Per-order variance falls off as `(1 + n)^(-decay)`.
    pub decay: f64,
    /// Zero the tip/tilt modes before rescaling.
    pub exclude_tilt: bool,
}

/// i.i.d. Gaussian coefficients with per-order variance `(1+n)^(-decay)`,
/// rescaled to `‖c‖₂ = rms_target`.
pub fn sample_coeffs(seed: u64, rms_target: f64, basis: &ZernikeBasis, decay: f64) -> ZernikeCoeffs {
    sample_coeffs_with(
        seed,
        basis,
        SampleOptions {
            rms_target,
            decay,
            exclude_tilt: false,
        },
    )
}

pub fn sample_coeffs_with(seed: u64, basis: &ZernikeBasis, opts: SampleOptions) -> ZernikeCoeffs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = basis
        .indices()
        .iter()
        .map(|&(n, _)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let sd = (1.0 + n as f64).powf(-opts.decay / 2.0);
            if opts.exclude_tilt && n == 1 {
                0.0
            } else {
                z * sd
            }
        })
        .collect();
    let norm: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        let k = opts.rms_target / norm;
        values.iter_mut().for_each(|v| *v *= k);
    }
    ZernikeCoeffs {
        values,
        basis_id: basis.id(),
    }
}

/// Draws coefficients as [`sample_coeffs_with`] until the even-`n` group has
/// RMS at least `min_even_rms`. Draw `k` uses seed `seed * 1000 + k`.
pub fn sample_even_parity(
    seed: u64,
    basis: &ZernikeBasis,
    opts: SampleOptions,
    min_even_rms: f64,
) -> Result<ZernikeCoeffs> {
    if min_even_rms > opts.rms_target {
        return Err(AoError::Argument(format!(
            "even-parity RMS {min_even_rms} exceeds the total RMS {}",
            opts.rms_target
        )));
    }
    for k in 0..1000 {
        let c = sample_coeffs_with(seed.wrapping_mul(1000).wrapping_add(k), basis, opts);
        if basis.parity_split(&c).0 >= min_even_rms {
            return Ok(c);
        }
    }
    Err(AoError::Argument(format!(
        "no draw reached even-parity RMS {min_even_rms} in 1000 tries"
    )))
}

/// Forward differences along x (columns) and y (rows), kept only where both
/// samples of the pair are in the mask.
pub fn phase_gradient(phase: &PhaseMap, mask: &Aperture) -> (Array2<f64>, Array2<f64>) {
    masked_gradient(&phase.values().view(), &mask.amplitude().view())
}

pub fn masked_gradient(v: &ArrayView2<f64>, support: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (r, c) = v.dim();
    let mut gx = Array2::zeros((r, c));
    let mut gy = Array2::zeros((r, c));
    for i in 0..r {
        for j in 0..c {
            if support[(i, j)] <= 0.0 {
                continue;
            }
            if j + 1 < c && support[(i, j + 1)] > 0.0 {
                gx[(i, j)] = v[(i, j + 1)] - v[(i, j)];
            }
            if i + 1 < r && support[(i + 1, j)] > 0.0 {
                gy[(i, j)] = v[(i + 1, j)] - v[(i, j)];
            }
        }
    }
    (gx, gy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aperture::{make_aperture, ShapeTag};

    #[test]
    fn order_six_has_27_modes() {
        // Oracle: count (n, m) with 1 <= n <= 6, |m| <= n, m ≡ n (mod 2).
        let mut count = 0;
        for n in 1..=6i32 {
            for m in -n..=n {
                if (n - m).rem_euclid(2) == 0 {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 27);
        assert_eq!(mode_indices(ModeSelection::RadialOrder(6)).len(), 27);
        assert_eq!(mode_indices(ModeSelection::FirstModes(6)).len(), 6);
    }

    #[test]
    fn radial_polynomials_match_closed_forms() {
        for &rho in &[0.0, 0.3, 0.7, 1.0] {
            assert!((radial(2, 0, rho) - (2.0 * rho * rho - 1.0)).abs() < 1e-12);
            assert!((radial(3, 1, rho) - (3.0 * rho.powi(3) - 2.0 * rho)).abs() < 1e-12);
            assert!(
                (radial(4, 0, rho) - (6.0 * rho.powi(4) - 6.0 * rho * rho + 1.0)).abs() < 1e-12
            );
        }
    }

    #[test]
    fn tilt_is_linear_along_x() {
        let basis = build_basis(64, 0.9, 2).unwrap();
        let k = basis.position(1, 1).unwrap();
        let row = basis.modes()[k].row(32);
        let slope = row[33] - row[32];
        assert!(slope > 0.0);
        for j in 20..44 {
            let x = j as f64 - 32.0;
            assert!((row[j] - slope * x).abs() < 1e-12);
        }
        // Orthonormalization only rescales the sampled tilt slightly.
        assert!((slope * basis.radius_px() / 2.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_basis(64, 0.0, 6).is_err());
        assert!(build_basis(64, 1.5, 6).is_err());
        assert!(build_basis(64, 0.9, 0).is_err());
    }

    #[test]
    fn zero_and_linear_coefficients() {
        let basis = build_basis(64, 0.9, 4).unwrap();
        let zero = basis.phase_from_coeffs(&ZernikeCoeffs::zeros(&basis)).unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));
        let c = sample_coeffs(1, 0.8, &basis, 1.0);
        let p1 = basis.phase_from_coeffs(&c).unwrap();
        let p2 = basis.phase_from_coeffs(&c.scaled(2.0)).unwrap();
        for (a, b) in p1.values().iter().zip(p2.values().iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_mismatch_is_rejected() {
        let a = build_basis(64, 0.9, 4).unwrap();
        let b = build_basis(64, 0.9, 3).unwrap();
        let c = ZernikeCoeffs::zeros(&b);
        assert!(a.phase_from_coeffs(&c).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_normalized() {
        let basis = build_basis(32, 0.9, 6).unwrap();
        let a = sample_coeffs(42, 1.0, &basis, 2.0);
        let b = sample_coeffs(42, 1.0, &basis, 2.0);
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        let t = sample_coeffs_with(
            42,
            &basis,
            SampleOptions {
                rms_target: 1.5,
                decay: 2.0,
                exclude_tilt: true,
            },
        );
        assert_eq!(t.values[0], 0.0);
        assert_eq!(t.values[1], 0.0);
        assert!((t.norm() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_coefficients_and_ignores_piston() {
        let basis = build_basis(128, 0.9, 6).unwrap();
        let c = sample_coeffs(5, 1.0, &basis, 0.0);
        let phase = basis.phase_from_coeffs(&c).unwrap();
        let fit = basis.fit_coeffs(&phase).unwrap();
        for (a, b) in fit.values.iter().zip(&c.values) {
            assert!((a - b).abs() < 1e-6);
        }
        let piston = PhaseMap::new(phase.values() + &(basis.mask() * 0.37));
        let fit2 = basis.fit_coeffs(&piston).unwrap();
        for (a, b) in fit2.values.iter().zip(&c.values) {
            assert!((a - b).abs() < 1e-6);
        }
        let zero = basis.fit_coeffs(&PhaseMap::zeros(128)).unwrap();
        assert!(zero.values.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn gradient_of_constant_and_tilt() {
        let ap = make_aperture(ShapeTag::Triangle, 64, 0.4).unwrap();
        let (gx, gy) = phase_gradient(&PhaseMap::new(Array2::from_elem((64, 64), 1.3)), &ap);
        assert!(gx.iter().chain(gy.iter()).all(|v| *v == 0.0));
        let s = 0.25;
        let tilt = PhaseMap::new(Array2::from_shape_fn((64, 64), |(_, j)| s * j as f64));
        let (gx, gy) = phase_gradient(&tilt, &ap);
        for ((i, j), v) in gx.indexed_iter() {
            if ap.in_support(i, j) && j + 1 < 64 && ap.in_support(i, j + 1) {
                assert!((v - s).abs() < 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(gy.iter().all(|v| *v == 0.0));
    }
}
