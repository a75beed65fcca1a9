//! Support-constrained Fourier phase retrieval (error reduction and hybrid
//! input-output) on a decimated pupil grid, followed by a Zernike fit of the
//! recovered wrapped phase and parametric refinement on the full grid.
//!
//! Decimating the pupil by `d` keeps the PSF sampling and shrinks the PSF
//! field to its central `side / d` samples, so the iterations run on a grid
//! just large enough to hold the magnitude window.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::refine::{finish, minimize, refine_objective, RefineOptions};
use super::{report, PhaseEstimate, Progress, SolverStatus};
use crate::aperture::Aperture;
use crate::error::{AoError, Result};
use crate::fft::{self, Exec};
use crate::optics::{resize_centered, PhaseMap, Psf};
use crate::par;
use crate::zernike::{sample_modes, solve_spd, ZernikeBasis};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalOptions {
    pub starts: usize,
    pub er_warmup: usize,
    pub hio_iterations: usize,
    pub er_iterations: usize,
    pub cycles: usize,
    pub beta: f64,
    /// Side of the centered PSF window whose magnitudes are enforced.
    pub window: usize,
    /// RMS (rad) of the random Zernike starting phases.
    pub start_rms: f64,
    /// Relative Fourier-magnitude misfit that counts as converged.
    pub misfit_threshold: f64,
    pub seed: u64,
    /// Parametric refinement of the best start; `None` skips it.
    pub refine: Option<RefineOptions>,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            er_warmup: 50,
            hio_iterations: 40,
            er_iterations: 10,
            cycles: 4,
            beta: 0.9,
            window: 63,
            start_rms: 1.0,
            misfit_threshold: 0.05,
            seed: 0,
            refine: Some(RefineOptions {
                max_iterations: 100,
                tolerance: 1e-3,
                ..RefineOptions::default()
            }),
            exec: Exec::default(),
        }
    }
}

impl RetrievalOptions {
    pub fn pad_factor(&self) -> usize {
        self.refine
            .as_ref()
            .map(|r| r.pad_factor)
            .unwrap_or(crate::optics::DEFAULT_PAD_FACTOR)
    }
}

/// Recovers a tilt-free phase from a PSF of `aperture`.
pub fn retrieve_phase_iterative(
    psf: &Psf,
    aperture: &Aperture,
    basis: &ZernikeBasis,
    opts: &RetrievalOptions,
) -> Result<PhaseEstimate> {
    retrieve_phase_iterative_observed(psf, aperture, basis, opts, None)
}

pub fn retrieve_phase_iterative_observed(
    psf: &Psf,
    aperture: &Aperture,
    basis: &ZernikeBasis,
    opts: &RetrievalOptions,
    progress: Progress<'_>,
) -> Result<PhaseEstimate> {
    let n = aperture.n();
    if basis.grid_n() != n {
        return Err(AoError::Dimension(format!(
            "basis grid {} does not match aperture grid {n}",
            basis.grid_n()
        )));
    }
    if opts.starts == 0 {
        return Err(AoError::Argument("at least one start is required".into()));
    }
    if !(opts.beta > 0.0 && opts.beta <= 1.0) {
        return Err(AoError::Argument(format!("beta must be in (0, 1], got {}", opts.beta)));
    }
    let pad = opts.pad_factor();
    let problem = CoarseProblem::new(psf, aperture, basis, pad, opts.window)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let seeds: Vec<u64> = (0..opts.starts).map(|_| rng.random()).collect();
    let runs = par::map_with(opts.exec, seeds.into_iter().enumerate().collect(), |(k, seed)| {
        let start = if k == 0 {
            vec![0.0; problem.analytic.len()]
        } else {
            random_start(seed, basis, opts.start_rms)
        };
        problem.run(&start, opts)
    });
    let (best_k, best) = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.misfit.total_cmp(&b.1.misfit))
        .expect("at least one start");
    report(progress, "retrieve", best_k, best.misfit);

    let analytic = problem.fit_wrapped_phase(&best.field)?;
    let fine = analytic_on_grid(basis, &analytic);
    let init = basis.fit_coeffs(&PhaseMap::new(fine))?;
    let status = if best.misfit <= opts.misfit_threshold {
        SolverStatus::Converged
    } else {
        SolverStatus::NotConverged
    };
    match &opts.refine {
        Some(ropts) => {
            let objective = refine_objective(psf, aperture, basis, pad)?;
            // The coarse misfit only ranks starts; the refined fit decides.
            let (coeffs, value, rstatus) = minimize(&objective, &init.values, ropts, "refine", progress);
            finish(aperture, basis, &coeffs, value, rstatus)
        }
        None => finish(aperture, basis, &init.values, best.misfit, status),
    }
}

fn random_start(seed: u64, basis: &ZernikeBasis, rms: f64) -> Vec<f64> {
    let c = crate::zernike::sample_coeffs(seed, rms, basis, 2.0);
    c.values
}

/// Analytic (not re-orthonormalized) modes combined on the pupil grid.
fn analytic_on_grid(basis: &ZernikeBasis, coeffs: &[f64]) -> Array2<f64> {
    let n = basis.grid_n();
    let (modes, _) = sample_modes(basis.indices(), n, 1.0, basis.radius_px());
    let mut out = Array2::zeros((n, n));
    for (c, m) in coeffs.iter().zip(&modes) {
        out.scaled_add(*c, m);
    }
    out
}

struct StartResult {
    field: Array2<Complex64>,
    misfit: f64,
}

struct CoarseProblem {
    /// Decimated aperture amplitude on the `m x m` grid.
    amp: Array2<f64>,
    /// Target Fourier magnitude; meaningful where `window > 0`.
    magnitude: Array2<f64>,
    window: Array2<f64>,
    magnitude_sq: f64,
    /// Analytic Zernike modes on the coarse grid.
    analytic: Vec<Array2<f64>>,
}

impl CoarseProblem {
    fn new(
        psf: &Psf,
        aperture: &Aperture,
        basis: &ZernikeBasis,
        pad: usize,
        window: usize,
    ) -> Result<Self> {
        let n = aperture.n();
        let side = n * pad;
        let (r, c) = psf.dim();
        if r > side || c > side {
            return Err(AoError::Dimension(format!(
                "PSF of {r}x{c} exceeds the {side}x{side} padded grid"
            )));
        }
        let w = window.min(r).min(c).max(1);
        let mut m = 8;
        while m < 2 * w && m < side {
            m *= 2;
        }
        let m = m.min(side);
        let d = side / m;
        if d * m != side {
            return Err(AoError::Dimension(format!("padded grid {side} is not a power of two")));
        }

        // Symmetric box filter of length d + 1 with half-weight ends keeps
        // the decimated grid centered on the fine grid's FFT center.
        let full_amp = resize_centered(&aperture.amplitude().view(), side, side);
        let taps: Vec<(isize, f64)> = if d == 1 {
            vec![(0, 1.0)]
        } else {
            let h = (d / 2) as isize;
            (-h..=h)
                .map(|t| (t, if t.abs() == h { 0.5 } else { 1.0 } / d as f64))
                .collect()
        };
        let (cf, cc) = ((side / 2) as isize, (m / 2) as isize);
        let amp = Array2::from_shape_fn((m, m), |(u, v)| {
            let fu = cf + (u as isize - cc) * d as isize;
            let fv = cf + (v as isize - cc) * d as isize;
            let mut acc = 0.0;
            for &(ti, wi) in &taps {
                for &(tj, wj) in &taps {
                    let (i, j) = (fu + ti, fv + tj);
                    if i >= 0 && j >= 0 && (i as usize) < side && (j as usize) < side {
                        acc += wi * wj * full_amp[(i as usize, j as usize)];
                    }
                }
            }
            acc
        });
        let coarse_energy: f64 = amp.iter().map(|a| a * a).sum();
        if coarse_energy <= 0.0 {
            return Err(AoError::Argument("aperture has no support".into()));
        }

        // Target energy: exact when the whole padded grid is supplied,
        // otherwise the window is assumed to hold the bare-aperture share.
        let win = resize_centered(&Array2::from_elem((w, w), 1.0).view(), m, m);
        let target = resize_centered(&psf.kernel().view(), m, m) * &win;
        let in_window: f64 = target.sum();
        if in_window <= 0.0 {
            return Err(AoError::Argument("PSF has no energy in the retrieval window".into()));
        }
        let share = if r == side && c == side {
            in_window / psf.energy()
        } else {
            let bare = fft::fft2_centered_unitary(&amp.mapv(|a| Complex64::new(a, 0.0)).view());
            bare.iter().zip(win.iter()).map(|(z, w)| z.norm_sqr() * w).sum::<f64>() / coarse_energy
        };
        let scale = coarse_energy * share / in_window;
        let magnitude = target.mapv(|h| (h * scale).sqrt());
        let magnitude_sq = magnitude.iter().map(|v| v * v).sum();

        let (analytic, _) = sample_modes(basis.indices(), m, d as f64, basis.radius_px());
        Ok(Self {
            amp,
            magnitude,
            window: win,
            magnitude_sq,
            analytic,
        })
    }

    fn project(&self, g: &Array2<Complex64>) -> (Array2<Complex64>, f64) {
        let mut spec = fft::fft2_centered_unitary(&g.view());
        let mut err = 0.0;
        ndarray::Zip::from(&mut spec)
            .and(&self.magnitude)
            .and(&self.window)
            .for_each(|z, &mag, &w| {
                if w > 0.0 {
                    let a = z.norm();
                    err += (a - mag) * (a - mag);
                    *z = if a > 0.0 { *z * (mag / a) } else { Complex64::new(mag, 0.0) };
                }
            });
        let back = fft::ifft2_centered_unitary(&spec.view());
        (back, (err / self.magnitude_sq.max(1e-300)).sqrt())
    }

    fn impose(&self, g: &mut Array2<Complex64>, back: &Array2<Complex64>, hio: Option<f64>) {
        ndarray::Zip::from(g).and(back).and(&self.amp).for_each(|g, b, &a| {
            if a > 0.0 {
                let n = b.norm();
                *g = if n > 0.0 { *b * (a / n) } else { Complex64::new(a, 0.0) };
            } else {
                *g = match hio {
                    Some(beta) => *g - *b * beta,
                    None => Complex64::new(0.0, 0.0),
                };
            }
        });
    }

    fn run(&self, start: &[f64], opts: &RetrievalOptions) -> StartResult {
        let phase = self.analytic_phase(start);
        let mut g = ndarray::Zip::from(&self.amp)
            .and(&phase)
            .map_collect(|&a, &p| if a > 0.0 { Complex64::from_polar(a, p) } else { Complex64::new(0.0, 0.0) });
        for _ in 0..opts.er_warmup {
            let (back, _) = self.project(&g);
            self.impose(&mut g, &back, None);
        }
        for _ in 0..opts.cycles {
            for _ in 0..opts.hio_iterations {
                let (back, _) = self.project(&g);
                self.impose(&mut g, &back, Some(opts.beta));
            }
            for _ in 0..opts.er_iterations {
                let (back, _) = self.project(&g);
                self.impose(&mut g, &back, None);
            }
        }
        // Misfit of the final support-consistent iterate.
        let (_, misfit) = self.project(&g);
        StartResult { field: g, misfit }
    }

    fn analytic_phase(&self, coeffs: &[f64]) -> Array2<f64> {
        let mut out = Array2::zeros(self.amp.dim());
        for (c, m) in coeffs.iter().zip(&self.analytic) {
            out.scaled_add(*c, m);
        }
        out
    }

    /// Least-squares Zernike fit to the wrapped phase differences of
    /// neighbouring well-lit samples, which sidesteps unwrapping.
    fn fit_wrapped_phase(&self, g: &Array2<Complex64>) -> Result<Vec<f64>> {
        let k = self.analytic.len();
        let peak = self.amp.iter().cloned().fold(0.0, f64::max);
        let lit = |i: usize, j: usize| self.amp[(i, j)] >= 0.5 * peak;
        let (rows, cols) = g.dim();
        let mut normal = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        let mut row = vec![0.0; k];
        let mut add = |a: (usize, usize), b: (usize, usize)| {
            let diff = (g[b] * g[a].conj()).arg();
            for (r, m) in row.iter_mut().zip(&self.analytic) {
                *r = m[b] - m[a];
            }
            for p in 0..k {
                rhs[p] += row[p] * diff;
                for q in p..k {
                    normal[(p, q)] += row[p] * row[q];
                }
            }
        };
        for i in 0..rows {
            for j in 0..cols {
                if !lit(i, j) {
                    continue;
                }
                if j + 1 < cols && lit(i, j + 1) {
                    add((i, j), (i, j + 1));
                }
                if i + 1 < rows && lit(i + 1, j) {
                    add((i, j), (i + 1, j));
                }
            }
        }
        for p in 0..k {
            for q in 0..p {
                normal[(p, q)] = normal[(q, p)];
            }
        }
        Ok(solve_spd(normal, rhs)?.iter().cloned().collect())
    }
}
