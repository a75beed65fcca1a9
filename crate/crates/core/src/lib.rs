//! Guidestar-free adaptive optics: Fourier optics forward model, Zernike
//! aberrations, aperture design, PSF and phase estimators, the closed
//! correction loop, and evaluation metrics.

// Negated float comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aperture;
pub mod config;
pub mod control;
pub mod error;
pub mod estimators;
pub mod fft;
pub mod io;
pub mod metrics;
pub mod optics;
pub mod par;
pub mod scenes;
pub mod zernike;

pub use error::{AoError, Result};
