//! Multi-frame phase estimation from measurements of one static scene taken
//! under different, known modulator patterns.
//!
//! Frame `f` sees the wavefront `φ(c) + d_f`. The scene is eliminated in
//! closed form with a Tikhonov-regularized least-squares latent, leaving
//!
//! `L(c) = Σ_ω [Σ_f |Y_f|² − |Σ_f H_f* Y_f|² / (Σ_f |H_f|² + γ)] / Σ_f ‖Y_f‖²`
//!
//! which depends on the wavefront only. With a single frame `L` rewards the
//! sharpest kernel, so at least two frames with distinct patterns are needed.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::blind::embed;
use super::refine::{finish, minimize, Objective, PupilModel, RefineOptions};
use super::{PhaseEstimate, Progress};
use crate::aperture::Aperture;
use crate::error::{ensure_same_shape, AoError, Result};
use crate::fft;
use crate::optics::{Measurement, PhaseMap};
use crate::zernike::{ZernikeBasis, ZernikeCoeffs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityOptions {
    /// Regularizer of the eliminated latent, in units of `|H|²` (`H(0) = 1`).
    pub gamma: f64,
    /// Iterations spent on each start before only the best one continues.
    pub screen_iterations: usize,
    pub refine: RefineOptions,
}

impl Default for DiversityOptions {
    fn default() -> Self {
        Self {
            gamma: 3e-5,
            screen_iterations: 15,
            refine: RefineOptions {
                max_iterations: 100,
                tolerance: 1e-3,
                ..RefineOptions::default()
            },
        }
    }
}

/// One measurement and the modulator phase that was applied while taking it.
#[derive(Clone, Copy, Debug)]
pub struct DiversityFrame<'a> {
    pub measurement: &'a Measurement,
    pub diversity: &'a PhaseMap,
}

type FrameState = (Vec<Complex64>, Array2<Complex64>, f64, Array2<f64>, Array2<Complex64>);

pub(crate) struct DiversityObjective<'a> {
    model: &'a PupilModel,
    offsets: Vec<usize>,
    kdim: (usize, usize),
    dim: (usize, usize),
    spectra: Vec<Array2<Complex64>>,
    diversity: Vec<Vec<f64>>,
    gamma: f64,
    norm: f64,
}

impl<'a> DiversityObjective<'a> {
    pub(crate) fn new(model: &'a PupilModel, frames: &[DiversityFrame<'_>], gamma: f64) -> Result<Self> {
        let dim = frames[0].measurement.dim();
        for f in frames {
            ensure_same_shape(f.measurement.dim(), dim, "diversity frames")?;
        }
        let kdim = (model.side.min(dim.0), model.side.min(dim.1));
        let spectra: Vec<Array2<Complex64>> = frames
            .iter()
            .map(|f| fft::fft2_real(&f.measurement.pixels().view()))
            .collect();
        let energy: f64 = spectra.iter().flat_map(|s| s.iter()).map(|z| z.norm_sqr()).sum();
        Ok(Self {
            model,
            offsets: model.window_offsets(kdim.0, kdim.1),
            kdim,
            dim,
            spectra,
            diversity: frames.iter().map(|f| model.sample(f.diversity)).collect(),
            gamma,
            norm: 1.0 / energy.max(1e-300),
        })
    }

    /// Per frame: pupil, far field, kernel total and kernel spectrum.
    fn frames(&self, coeffs: &[f64]) -> Vec<FrameState> {
        let base = self.model.support_phase(coeffs);
        self.diversity
            .iter()
            .map(|d| {
                let phase: Vec<f64> = base.iter().zip(d).map(|(a, b)| a + b).collect();
                let (pupil, field) = self.model.field(&phase);
                let flat = field.as_slice().expect("standard layout");
                let intensity: Vec<f64> = self.offsets.iter().map(|k| flat[*k].norm_sqr()).collect();
                let total = intensity.iter().sum::<f64>().max(1e-300);
                let h = Array2::from_shape_vec(self.kdim, intensity).expect("window size") / total;
                let spectrum = fft::fft2_real(&embed(&h, self.dim).view());
                (pupil, field, total, h, spectrum)
            })
            .collect()
    }

    fn accumulate(&self, kernels: &[Array2<Complex64>]) -> (Array2<Complex64>, Array2<f64>, f64) {
        let mut s = Array2::<Complex64>::zeros(self.dim);
        let mut q = Array2::from_elem(self.dim, self.gamma);
        let mut data = 0.0;
        for (h, y) in kernels.iter().zip(&self.spectra) {
            ndarray::Zip::from(&mut s).and(&mut q).and(h).and(y).for_each(|s, q, h, y| {
                *s += h.conj() * y;
                *q += h.norm_sqr();
            });
            data += y.iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
        let explained: f64 = s.iter().zip(q.iter()).map(|(s, q)| s.norm_sqr() / q).sum();
        (s, q, (data - explained) * self.norm)
    }
}

impl Objective for DiversityObjective<'_> {
    fn value(&self, coeffs: &[f64]) -> f64 {
        let kernels: Vec<_> = self.frames(coeffs).into_iter().map(|f| f.4).collect();
        self.accumulate(&kernels).2
    }

    fn value_and_gradient(&self, coeffs: &[f64]) -> (f64, Vec<f64>) {
        let frames = self.frames(coeffs);
        let kernels: Vec<_> = frames.iter().map(|f| f.4.clone()).collect();
        let (s, q, value) = self.accumulate(&kernels);
        let (rows, cols) = self.dim;
        let (kr, kc) = self.kdim;
        let mut grad = vec![0.0; coeffs.len()];
        for ((pupil, field, total, h, hs), y) in frames.into_iter().zip(&self.spectra) {
            // ∂L/∂h(p) = Re Σ_ω B(ω) e^{-iωp} for the embedded kernel.
            let mut b = Array2::<Complex64>::zeros(self.dim);
            ndarray::Zip::from(&mut b)
                .and(&s)
                .and(&q)
                .and(&hs)
                .and(y)
                .for_each(|b, s, q, h, y| {
                    *b = (-2.0 * s * y.conj() / q + 2.0 * s.norm_sqr() * h.conj() / (q * q)) * self.norm;
                });
            fft::fft2_inplace(&mut b);
            let mut g = Vec::with_capacity(kr * kc);
            for a in 0..kr {
                let i = (a as isize - (kr / 2) as isize).rem_euclid(rows as isize) as usize;
                for c in 0..kc {
                    let j = (c as isize - (kc / 2) as isize).rem_euclid(cols as isize) as usize;
                    g.push(b[(i, j)].re);
                }
            }
            let mean: f64 = g.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
            let half: Vec<f64> = g.iter().map(|a| 0.5 * (a - mean) / total).collect();
            let part = self.model.backprop(&pupil, field, &self.offsets, &half);
            grad.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        (value, grad)
    }
}

/// Estimates the common wavefront of `frames` starting from each of `inits`
/// and keeps the start with the lowest final objective.
pub fn refine_phase_diversity(
    frames: &[DiversityFrame<'_>],
    aperture: &Aperture,
    basis: &ZernikeBasis,
    inits: &[ZernikeCoeffs],
    opts: &DiversityOptions,
) -> Result<PhaseEstimate> {
    refine_phase_diversity_observed(frames, aperture, basis, inits, opts, None)
}

pub fn refine_phase_diversity_observed(
    frames: &[DiversityFrame<'_>],
    aperture: &Aperture,
    basis: &ZernikeBasis,
    inits: &[ZernikeCoeffs],
    opts: &DiversityOptions,
    progress: Progress<'_>,
) -> Result<PhaseEstimate> {
    if frames.len() < 2 {
        return Err(AoError::Argument(format!(
            "phase diversity needs at least two frames, got {}",
            frames.len()
        )));
    }
    if inits.is_empty() {
        return Err(AoError::Argument("no initial coefficients".into()));
    }
    if let Some(bad) = inits.iter().find(|c| c.values.len() != basis.len()) {
        return Err(AoError::Argument(format!(
            "{} initial coefficients for a {}-mode basis",
            bad.values.len(),
            basis.len()
        )));
    }
    if !(opts.gamma > 0.0) {
        return Err(AoError::Argument(format!("gamma must be > 0, got {}", opts.gamma)));
    }
    for f in frames {
        ensure_same_shape(f.diversity.dim(), aperture.dim(), "diversity phase")?;
    }
    let model = PupilModel::new(aperture, basis, opts.refine.pad_factor)?;
    let objective = DiversityObjective::new(&model, frames, opts.gamma)?;
    let mut start = inits[0].values.clone();
    if inits.len() > 1 {
        let screen = RefineOptions {
            max_iterations: opts.screen_iterations,
            ..opts.refine.clone()
        };
        let mut best = f64::INFINITY;
        for init in inits {
            let (c, v, _) = minimize(&objective, &init.values, &screen, "diversity-screen", progress);
            if v < best {
                best = v;
                start = c;
            }
        }
    }
    let (coeffs, value, status) = minimize(&objective, &start, &opts.refine, "diversity", progress);
    finish(aperture, basis, &coeffs, value, status)
}
