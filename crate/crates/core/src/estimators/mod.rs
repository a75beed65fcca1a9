//! PSF and wavefront estimators.
//!
//! The PSF stage turns one natural-scene measurement into a unit-energy
//! kernel; the phase stage turns a kernel into a tilt-free wavefront under a
//! known aperture. Both stages are optimization based and deterministic for
//! fixed inputs, options and seeds.

mod blind;
mod diversity;
mod patches;
mod refine;
mod retrieval;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::aperture::Aperture;
use crate::error::{ensure_same_shape, Result};
use crate::optics::{PhaseMap, Psf};
use crate::zernike::ZernikeCoeffs;

pub use blind::{estimate_psf_blind, estimate_psf_blind_observed, BlindOptions};
pub use diversity::{
    refine_phase_diversity, refine_phase_diversity_observed, DiversityFrame, DiversityOptions,
};
pub use patches::{patchify, PatchLayout, PatchStack};
pub use refine::{
    refine_objective, refine_phase_zernike, refine_phase_zernike_observed, RefineObjective,
    RefineOptions,
};
pub use retrieval::{retrieve_phase_iterative, retrieve_phase_iterative_observed, RetrievalOptions};

/// How an iterative solver finished.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    /// Iteration budget exhausted or misfit above threshold; the best iterate
    /// is returned.
    NotConverged,
    /// Line search could not decrease the objective; the best iterate is
    /// returned.
    Stalled,
}

impl SolverStatus {
    pub fn is_converged(self) -> bool {
        self == SolverStatus::Converged
    }
}

/// Progress report: solver stage, iteration, objective value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProgressEvent<'a> {
    pub stage: &'a str,
    pub iteration: usize,
    pub objective: f64,
}

/// Optional progress sink shared by all estimators.
pub type Progress<'a> = Option<&'a (dyn Fn(ProgressEvent<'_>) + Sync)>;

pub(crate) fn report(progress: Progress<'_>, stage: &str, iteration: usize, objective: f64) {
    if let Some(cb) = progress {
        cb(ProgressEvent {
            stage,
            iteration,
            objective,
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsfEstimate {
    /// Unit-energy kernel.
    pub psf: Psf,
    /// `‖Y − X ⊛ h‖²` at the returned iterate.
    pub fidelity: f64,
    pub iterations_used: usize,
    pub status: SolverStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseEstimate {
    /// Tilt- and piston-free phase, zero outside the aperture support.
    pub phase: PhaseMap,
    pub coeffs: ZernikeCoeffs,
    pub residual: f64,
    pub status: SolverStatus,
    /// Set when the aperture is point-symmetric, so the phase is only known
    /// up to [`crate::optics::conjugate_flip`].
    pub ambiguous: bool,
}

/// Subtracts the least-squares piston and tip/tilt plane over the aperture
/// support. Samples outside the support are set to zero.
pub fn remove_tilt_piston(phase: &PhaseMap, aperture: &Aperture) -> Result<PhaseMap> {
    ensure_same_shape(phase.dim(), aperture.dim(), "remove_tilt_piston")?;
    let n = aperture.n();
    let c = (n / 2) as f64;
    let mut normal = nalgebra::Matrix3::<f64>::zeros();
    let mut rhs = nalgebra::Vector3::<f64>::zeros();
    let v = phase.values();
    for ((i, j), a) in aperture.amplitude().indexed_iter() {
        if *a <= 0.0 {
            continue;
        }
        let row = nalgebra::Vector3::new(1.0, j as f64 - c, i as f64 - c);
        normal += row * row.transpose();
        rhs += row * v[(i, j)];
    }
    let coef = normal
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(|| {
            // Degenerate support (a line or a point): remove the mean only.
            let count = normal[(0, 0)].max(1.0);
            nalgebra::Vector3::new(rhs[0] / count, 0.0, 0.0)
        });
    let mut out = Array2::zeros((n, n));
    for ((i, j), a) in aperture.amplitude().indexed_iter() {
        if *a > 0.0 {
            out[(i, j)] = v[(i, j)] - coef[0] - coef[1] * (j as f64 - c) - coef[2] * (i as f64 - c);
        }
    }
    Ok(PhaseMap::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aperture::{make_aperture, ShapeTag};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_and_tilt_are_removed() {
        let ap = make_aperture(ShapeTag::Triangle, 64, 0.4).unwrap();
        let constant = PhaseMap::new(Array2::from_elem((64, 64), 2.5));
        let out = remove_tilt_piston(&constant, &ap).unwrap();
        assert!(out.values().iter().all(|v| v.abs() < 1e-12));
        let tilt = PhaseMap::new(Array2::from_shape_fn((64, 64), |(i, j)| {
            0.3 * j as f64 - 0.2 * i as f64 + 1.0
        }));
        let out = remove_tilt_piston(&tilt, &ap).unwrap();
        assert!(out.values().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn removal_is_idempotent() {
        let ap = make_aperture(ShapeTag::Disk, 64, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PhaseMap::new(Array2::from_shape_fn((64, 64), |_| rng.random_range(-2.0..2.0)));
        let once = remove_tilt_piston(&p, &ap).unwrap();
        let twice = remove_tilt_piston(&once, &ap).unwrap();
        for (a, b) in once.values().iter().zip(twice.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mean: f64 = once.values().sum() / ap.fill_count() as f64;
        assert!(mean.abs() < 1e-12);
    }
}
