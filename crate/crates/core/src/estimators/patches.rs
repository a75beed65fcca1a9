use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{AoError, Result};
use crate::optics::Measurement;

/// Row-major tiling descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub rows: usize,
    pub cols: usize,
    pub patch_m: usize,
    pub patch_n: usize,
}

/// Non-overlapping patches of a measurement, stacked along axis 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchStack {
    pub patches: Array3<f64>,
    pub layout: PatchLayout,
}

impl PatchStack {
    pub fn len(&self) -> usize {
        self.patches.len_of(ndarray::Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inverse of [`patchify`].
    pub fn reassemble(&self) -> Array2<f64> {
        let l = self.layout;
        let mut out = Array2::zeros((l.rows * l.patch_m, l.cols * l.patch_n));
        for p in 0..self.len() {
            let (r, c) = (p / l.cols, p % l.cols);
            out.slice_mut(s![
                r * l.patch_m..(r + 1) * l.patch_m,
                c * l.patch_n..(c + 1) * l.patch_n
            ])
            .assign(&self.patches.slice(s![p, .., ..]));
        }
        out
    }
}

/// Cuts a measurement into `patch_m x patch_n` tiles in row-major order.
pub fn patchify(measurement: &Measurement, patch_m: usize, patch_n: usize) -> Result<PatchStack> {
    let (h, w) = measurement.dim();
    if patch_m == 0 || patch_n == 0 || h % patch_m != 0 || w % patch_n != 0 {
        return Err(AoError::Argument(format!(
            "{h}x{w} measurement is not divisible into {patch_m}x{patch_n} patches"
        )));
    }
    let layout = PatchLayout {
        rows: h / patch_m,
        cols: w / patch_n,
        patch_m,
        patch_n,
    };
    let count = layout.rows * layout.cols;
    let mut patches = Array3::zeros((count, patch_m, patch_n));
    let px = measurement.pixels();
    for p in 0..count {
        let (r, c) = (p / layout.cols, p % layout.cols);
        patches.slice_mut(s![p, .., ..]).assign(&px.slice(s![
            r * patch_m..(r + 1) * patch_m,
            c * patch_n..(c + 1) * patch_n
        ]));
    }
    Ok(PatchStack { patches, layout })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meas(h: usize, w: usize) -> Measurement {
        Measurement::new(Array2::from_shape_fn((h, w), |(i, j)| (i * w + j) as f64), 0.0).unwrap()
    }

    #[test]
    fn sixteen_patches_of_64() {
        let m = meas(256, 256);
        let p = patchify(&m, 64, 64).unwrap();
        assert_eq!(p.len(), 16);
        assert_eq!(p.patches.len(), 256 * 256);
        assert_eq!(&p.reassemble(), m.pixels());
    }

    #[test]
    fn single_patch_is_the_measurement() {
        let m = meas(32, 48);
        let p = patchify(&m, 32, 48).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.patches.slice(s![0, .., ..]), m.pixels().view());
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        assert!(patchify(&meas(30, 32), 8, 8).is_err());
        assert!(patchify(&meas(32, 32), 0, 8).is_err());
    }
}
