//! Parametric phase refinement: fits Zernike coefficients so the modeled
//! PSF matches a target PSF, with analytic gradients and L-BFGS.

use std::collections::VecDeque;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{remove_tilt_piston, report, PhaseEstimate, Progress, SolverStatus};
use crate::aperture::{Aperture, SYMMETRY_TOL};
use crate::error::{AoError, Result};
use crate::fft;
use crate::optics::{PhaseMap, Psf, DEFAULT_PAD_FACTOR};
use crate::zernike::{ZernikeBasis, ZernikeCoeffs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineOptions {
    pub pad_factor: usize,
    pub max_iterations: usize,
    /// L-BFGS memory.
    pub history: usize,
    /// Stop when the objective drops below this value.
    pub objective_floor: f64,
    /// Stop when the relative decrease over `patience` iterations is below
    /// this value.
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            pad_factor: DEFAULT_PAD_FACTOR,
            max_iterations: 150,
            history: 8,
            objective_floor: 1e-12,
            tolerance: 1e-6,
            patience: 5,
        }
    }
}

/// Zernike-parameterized pupil and its far field on the padded grid, kept
/// in unshifted FFT layout and restricted to the aperture support so one
/// evaluation costs one transform.
#[derive(Clone, Debug)]
pub(crate) struct PupilModel {
    pub(crate) side: usize,
    /// Support samples: pupil-grid index, flat FFT-layout offset, amplitude.
    support: Vec<((usize, usize), usize, f64)>,
    /// Basis modes sampled on `support`.
    modes: Vec<Vec<f64>>,
}

impl PupilModel {
    pub(crate) fn new(aperture: &Aperture, basis: &ZernikeBasis, pad_factor: usize) -> Result<Self> {
        let n = aperture.n();
        if basis.grid_n() != n {
            return Err(AoError::Dimension(format!(
                "basis grid {} does not match aperture grid {n}",
                basis.grid_n()
            )));
        }
        if pad_factor == 0 {
            return Err(AoError::Argument("pad_factor must be >= 1".into()));
        }
        let side = n * pad_factor;
        let off = (side / 2 - n / 2) as isize;
        let mut support = Vec::new();
        for ((i, j), &amp) in aperture.amplitude().indexed_iter() {
            if amp > 0.0 {
                let fi = unshift(side, i as isize + off);
                let fj = unshift(side, j as isize + off);
                support.push(((i, j), fi * side + fj, amp));
            }
        }
        let modes = basis
            .modes()
            .iter()
            .map(|m| support.iter().map(|(ij, _, _)| m[*ij]).collect())
            .collect();
        Ok(Self { side, support, modes })
    }

    /// Flat FFT-layout offsets of a centered `rows x cols` window, row-major.
    pub(crate) fn window_offsets(&self, rows: usize, cols: usize) -> Vec<usize> {
        let side = self.side;
        let mut out = Vec::with_capacity(rows * cols);
        for a in 0..rows {
            let i = unshift(side, a as isize - (rows / 2) as isize + (side / 2) as isize);
            for b in 0..cols {
                let j = unshift(side, b as isize - (cols / 2) as isize + (side / 2) as isize);
                out.push(i * side + j);
            }
        }
        out
    }

    pub(crate) fn support_phase(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut phase = vec![0.0; self.support.len()];
        for (c, m) in coeffs.iter().zip(&self.modes) {
            if *c != 0.0 {
                phase.iter_mut().zip(m).for_each(|(p, z)| *p += c * z);
            }
        }
        phase
    }

    pub(crate) fn sample(&self, phase: &PhaseMap) -> Vec<f64> {
        let v = phase.values();
        self.support.iter().map(|(ij, _, _)| v[*ij]).collect()
    }

    /// Pupil samples and the unnormalized far field `F{P}`.
    pub(crate) fn field(&self, phase: &[f64]) -> (Vec<Complex64>, Array2<Complex64>) {
        let side = self.side;
        let mut grid = Array2::zeros((side, side));
        let flat = grid.as_slice_mut().expect("standard layout");
        let pupil: Vec<Complex64> = self
            .support
            .iter()
            .zip(phase)
            .map(|((_, k, a), p)| {
                let z = Complex64::from_polar(*a, *p);
                flat[*k] = z;
                z
            })
            .collect();
        fft::fft2_inplace(&mut grid);
        (pupil, grid)
    }

    /// Chain rule from `half[k] = ½ ∂L/∂I` on window samples `offsets` to
    /// `∂L/∂c`, where `I = |F{P}|²`:
    /// `∂L/∂φ = 4 Im(conj(P) · F⁻¹{half · F{P}})` with an unnormalized inverse.
    pub(crate) fn backprop(
        &self,
        pupil: &[Complex64],
        mut field: Array2<Complex64>,
        offsets: &[usize],
        half: &[f64],
    ) -> Vec<f64> {
        let weighted: Vec<Complex64> = {
            let src = field.as_slice().expect("standard layout");
            offsets.iter().zip(half).map(|(k, r)| src[*k] * *r).collect()
        };
        field.fill(Complex64::new(0.0, 0.0));
        {
            let dst = field.as_slice_mut().expect("standard layout");
            for (k, w) in offsets.iter().zip(weighted) {
                dst[*k] = w;
            }
        }
        fft::ifft2_inplace(&mut field);
        let back = field.as_slice().expect("standard layout");
        let dphi: Vec<f64> = self
            .support
            .iter()
            .zip(pupil)
            .map(|((_, k, _), p)| 4.0 * (p.conj() * back[*k]).im)
            .collect();
        self.modes
            .iter()
            .map(|m| m.iter().zip(&dphi).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Centered index `k` sits at FFT-layout index `(k − side/2) mod side`.
fn unshift(side: usize, k: isize) -> usize {
    (k - (side / 2) as isize).rem_euclid(side as isize) as usize
}

/// `L(c) = Σ_W (I(c)/ΣI(c) − H/ΣH)²` over the target window `W`, where
/// `I(c)` is the modeled PSF and `H` the target; both are normalized to unit
/// energy inside the window, so the target's scale does not matter.
#[derive(Clone, Debug)]
pub struct RefineObjective<'a> {
    aperture: &'a Aperture,
    basis: &'a ZernikeBasis,
    model: PupilModel,
    offsets: Vec<usize>,
    target: Vec<f64>,
}

/// Builds the objective for a target PSF. A target smaller than the padded
/// grid is treated as a centered window; outside it the model is free.
pub fn refine_objective<'a>(
    psf: &Psf,
    aperture: &'a Aperture,
    basis: &'a ZernikeBasis,
    pad_factor: usize,
) -> Result<RefineObjective<'a>> {
    let model = PupilModel::new(aperture, basis, pad_factor)?;
    let side = model.side;
    let (r, c) = psf.dim();
    if r > side || c > side {
        return Err(AoError::Dimension(format!(
            "PSF of {r}x{c} exceeds the {side}x{side} padded grid"
        )));
    }
    let offsets = model.window_offsets(r, c);
    let total = psf.energy();
    let target = psf.kernel().iter().map(|h| h / total).collect();
    Ok(RefineObjective {
        aperture,
        basis,
        model,
        offsets,
        target,
    })
}

impl RefineObjective<'_> {
    pub fn basis(&self) -> &ZernikeBasis {
        self.basis
    }

    /// Objective value and half its derivative with respect to each
    /// windowed intensity sample.
    fn residual(&self, field: &Array2<Complex64>) -> (f64, Vec<f64>) {
        let flat = field.as_slice().expect("standard layout");
        let intensity: Vec<f64> = self.offsets.iter().map(|k| flat[*k].norm_sqr()).collect();
        normalized_misfit(&intensity, &self.target)
    }

    /// Objective value at a full pupil-grid phase.
    pub fn value_at_phase(&self, phase: &PhaseMap) -> Result<f64> {
        crate::error::ensure_same_shape(phase.dim(), self.aperture.dim(), "refine objective")?;
        Ok(self.residual(&self.model.field(&self.model.sample(phase)).1).0)
    }

    pub fn value(&self, coeffs: &[f64]) -> f64 {
        let (_, field) = self.model.field(&self.model.support_phase(coeffs));
        self.residual(&field).0
    }

    /// Objective and its gradient with respect to the coefficients.
    pub fn value_and_gradient(&self, coeffs: &[f64]) -> (f64, Vec<f64>) {
        let (pupil, field) = self.model.field(&self.model.support_phase(coeffs));
        let (value, half) = self.residual(&field);
        let grad = self.model.backprop(&pupil, field, &self.offsets, &half);
        (value, grad)
    }
}

/// `Σ (I/ΣI − h)²` and half its derivative with respect to `I`.
fn normalized_misfit(intensity: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let total: f64 = intensity.iter().sum::<f64>().max(1e-300);
    let r: Vec<f64> = intensity.iter().zip(target).map(|(i, h)| i / total - h).collect();
    let value: f64 = r.iter().map(|v| v * v).sum();
    let mean_r: f64 = r.iter().zip(intensity).map(|(a, i)| a * i).sum::<f64>() / total;
    let half = r.iter().map(|a| (a - mean_r) / total).collect();
    (value, half)
}

/// Refines `init` against `psf`.
pub fn refine_phase_zernike(
    psf: &Psf,
    aperture: &Aperture,
    basis: &ZernikeBasis,
    init: &ZernikeCoeffs,
    opts: &RefineOptions,
) -> Result<PhaseEstimate> {
    refine_phase_zernike_observed(psf, aperture, basis, init, opts, None)
}

pub fn refine_phase_zernike_observed(
    psf: &Psf,
    aperture: &Aperture,
    basis: &ZernikeBasis,
    init: &ZernikeCoeffs,
    opts: &RefineOptions,
    progress: Progress<'_>,
) -> Result<PhaseEstimate> {
    if init.values.len() != basis.len() {
        return Err(AoError::Argument(format!(
            "{} initial coefficients for a {}-mode basis",
            init.values.len(),
            basis.len()
        )));
    }
    let objective = refine_objective(psf, aperture, basis, opts.pad_factor)?;
    let (coeffs, value, status) = minimize(&objective, &init.values, opts, "refine", progress);
    finish(aperture, basis, &coeffs, value, status)
}

pub(crate) fn finish(
    aperture: &Aperture,
    basis: &ZernikeBasis,
    coeffs: &[f64],
    residual: f64,
    status: SolverStatus,
) -> Result<PhaseEstimate> {
    let phase = remove_tilt_piston(&PhaseMap::new(basis.combine(coeffs)), aperture)?;
    let coeffs = basis.fit_coeffs_weighted(&phase, &aperture.support().view())?;
    Ok(PhaseEstimate {
        phase,
        coeffs,
        residual,
        status,
        ambiguous: aperture.is_point_symmetric(SYMMETRY_TOL),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L-BFGS with a monotone Armijo backtracking line search.
/// Smooth objective over coefficient vectors.
pub(crate) trait Objective {
    fn value(&self, x: &[f64]) -> f64;
    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>);
}

impl Objective for RefineObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        RefineObjective::value(self, x)
    }

    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        RefineObjective::value_and_gradient(self, x)
    }
}

pub(crate) fn minimize(
    objective: &impl Objective,
    init: &[f64],
    opts: &RefineOptions,
    stage: &str,
    progress: Progress<'_>,
) -> (Vec<f64>, f64, SolverStatus) {
    let mut x = init.to_vec();
    let (mut f, mut g) = objective.value_and_gradient(&x);
    report(progress, stage, 0, f);
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut recent = VecDeque::from([f]);
    for it in 1..=opts.max_iterations {
        if f <= opts.objective_floor {
            return (x, f, SolverStatus::Converged);
        }
        // Two-loop recursion.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = memory
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1e-2 / dot(&g, &g).sqrt().max(1e-300));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            memory.clear();
            dir = g.iter().map(|v| -v * 1e-2 / dot(&g, &g).sqrt().max(1e-300)).collect();
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let ft = objective.value(&trial);
            if ft <= f + 1e-4 * step * slope && ft < f {
                accepted = Some(trial);
                break;
            }
            step *= 0.5;
        }
        let Some(next) = accepted else {
            return (x, f, SolverStatus::Stalled);
        };
        let (fn_, gn) = objective.value_and_gradient(&next);
        let s: Vec<f64> = next.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            memory.push_back((s, y, 1.0 / sy));
            if memory.len() > opts.history.max(1) {
                memory.pop_front();
            }
        }
        x = next;
        f = fn_;
        g = gn;
        report(progress, stage, it, f);
        recent.push_back(f);
        if recent.len() > opts.patience.max(1) + 1 {
            recent.pop_front();
            let old = recent[0];
            if (old - f) <= opts.tolerance * old {
                return (x, f, SolverStatus::Converged);
            }
        }
    }
    let status = if f <= opts.objective_floor {
        SolverStatus::Converged
    } else {
        SolverStatus::NotConverged
    };
    (x, f, status)
}
