//! Two-dimensional FFT helpers on `ndarray` grids.
//!
//! All transforms here are unnormalized except the `*_centered_unitary`
//! variants, which carry the `1/sqrt(rows*cols)` factor and place the zero
//! frequency at index `(rows/2, cols/2)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{s, Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

type PlanKey = (usize, bool);
type PlanCache = Mutex<HashMap<PlanKey, Arc<dyn Fft<f64>>>>;

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    static CACHE: OnceLock<PlanCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (len, direction == FftDirection::Forward);
    let mut guard = cache.lock().expect("fft plan cache poisoned");
    guard
        .entry(key)
        .or_insert_with(|| FftPlanner::new().plan_fft(len, direction))
        .clone()
}

/// Whether row transforms fan out over threads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

#[cfg_attr(not(feature = "parallel"), allow(unused_variables))]
fn rows_in_place(data: &mut [Complex64], width: usize, fft: &Arc<dyn Fft<f64>>, exec: Exec) {
    let scratch_len = fft.get_inplace_scratch_len();
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            data.par_chunks_mut(width * 16).for_each_init(
                || vec![Complex64::new(0.0, 0.0); scratch_len],
                |scratch, chunk| fft.process_with_scratch(chunk, scratch),
            );
        }
        _ => {
            let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];
            fft.process_with_scratch(data, &mut scratch);
        }
    }
}

fn transform(a: &mut Array2<Complex64>, direction: FftDirection, exec: Exec) {
    let (rows, cols) = a.dim();
    if rows == 0 || cols == 0 {
        return;
    }
    if !a.is_standard_layout() {
        *a = a.as_standard_layout().to_owned();
    }
    let row_fft = plan(cols, direction);
    rows_in_place(a.as_slice_mut().expect("standard layout"), cols, &row_fft, exec);

    let data = a.as_slice_mut().expect("standard layout");
    thread_local! {
        static SCRATCH: std::cell::RefCell<Vec<Complex64>> = const { std::cell::RefCell::new(Vec::new()) };
    }
    SCRATCH.with(|cell| {
        let mut t = cell.borrow_mut();
        t.resize(rows * cols, Complex64::new(0.0, 0.0));
        transpose(data, &mut t, rows, cols);
        let col_fft = plan(rows, direction);
        rows_in_place(&mut t, rows, &col_fft, exec);
        transpose(&t, data, cols, rows);
    });
}

/// Cache-blocked transpose of a row-major `rows x cols` buffer.
fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Unnormalized forward 2-D DFT, in place.
pub fn fft2_inplace(a: &mut Array2<Complex64>) {
    transform(a, FftDirection::Forward, Exec::default());
}

/// Unnormalized inverse 2-D DFT, in place (no `1/N` factor).
pub fn ifft2_inplace(a: &mut Array2<Complex64>) {
    transform(a, FftDirection::Inverse, Exec::default());
}

pub fn fft2_with(a: &mut Array2<Complex64>, exec: Exec) {
    transform(a, FftDirection::Forward, exec);
}

/// Circular shift so that index 0 moves to `(rows/2, cols/2)`.
pub fn fftshift<T: Clone>(a: &ArrayView2<T>) -> Array2<T> {
    let (r, c) = a.dim();
    roll(a, r / 2, c / 2)
}

/// Inverse of [`fftshift`]; differs from it only for odd sizes.
pub fn ifftshift<T: Clone>(a: &ArrayView2<T>) -> Array2<T> {
    let (r, c) = a.dim();
    roll(a, r - r / 2, c - c / 2)
}

/// `out[(i + dr) % r, (j + dc) % c] = a[i, j]`.
pub fn roll<T: Clone>(a: &ArrayView2<T>, dr: usize, dc: usize) -> Array2<T> {
    let (r, c) = a.dim();
    if r == 0 || c == 0 {
        return a.to_owned();
    }
    let (dr, dc) = (dr % r, dc % c);
    let mut out = Array2::from_elem((r, c), a[(0, 0)].clone());
    for (src_r, dst_r) in [(0..r - dr, dr..r), (r - dr..r, 0..dr)] {
        for (src_c, dst_c) in [(0..c - dc, dc..c), (c - dc..c, 0..dc)] {
            if src_r.is_empty() || src_c.is_empty() {
                continue;
            }
            out.slice_mut(s![dst_r.clone(), dst_c.clone()])
                .assign(&a.slice(s![src_r.clone(), src_c]));
        }
    }
    out
}

/// Centered, unitary forward transform: zero frequency at `(rows/2, cols/2)`
/// with the spatial origin at the same index.
pub fn fft2_centered_unitary(a: &ArrayView2<Complex64>) -> Array2<Complex64> {
    let mut w = ifftshift(a);
    fft2_inplace(&mut w);
    let scale = 1.0 / ((w.len()) as f64).sqrt();
    w.mapv_inplace(|z| z * scale);
    fftshift(&w.view())
}

/// Inverse of [`fft2_centered_unitary`].
pub fn ifft2_centered_unitary(a: &ArrayView2<Complex64>) -> Array2<Complex64> {
    let mut w = ifftshift(a);
    ifft2_inplace(&mut w);
    let scale = 1.0 / ((w.len()) as f64).sqrt();
    w.mapv_inplace(|z| z * scale);
    fftshift(&w.view())
}

/// Forward transform of a real array.
pub fn fft2_real(a: &ArrayView2<f64>) -> Array2<Complex64> {
    let mut w = a.mapv(|v| Complex64::new(v, 0.0));
    fft2_inplace(&mut w);
    w
}

/// Real part of the normalized inverse transform.
pub fn ifft2_real(a: &Array2<Complex64>) -> Array2<f64> {
    let mut w = a.clone();
    ifft2_inplace(&mut w);
    let scale = 1.0 / (w.len() as f64);
    w.mapv(|z| z.re * scale)
}

/// Sum of squared magnitudes.
pub fn energy(a: &ArrayView2<Complex64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

#[allow(dead_code)]
pub(crate) fn axis_len(a: &Array2<Complex64>, axis: usize) -> usize {
    a.len_of(Axis(axis))
}
