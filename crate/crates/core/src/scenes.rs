//! Synthetic test scenes.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::optics::SceneImage;

/// Periodic dead-leaves texture: `n x n`, occluding disks with power-law
/// radii and uniform gray levels, wrapped at the borders so the scene is
/// consistent with circular convolution.
pub fn dead_leaves(n: usize, seed: u64) -> SceneImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Array2::from_elem((n, n), f64::NAN);
    let mut unfilled = n * n;
    let (rmin, rmax) = (1.5f64, n as f64 / 6.0);
    // Radii drawn from p(r) ∝ r^-3 on [rmin, rmax].
    let draw_radius = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.random();
        let a = rmin.powi(-2);
        let b = rmax.powi(-2);
        (a - u * (a - b)).powf(-0.5)
    };
    let mut placed = 0;
    while unfilled > 0 && placed < 200_000 {
        let r = draw_radius(&mut rng);
        let cy: f64 = rng.random_range(0.0..n as f64);
        let cx: f64 = rng.random_range(0.0..n as f64);
        let gray: f64 = rng.random_range(0.05..0.95);
        let ri = r.ceil() as isize;
        for di in -ri..=ri {
            for dj in -ri..=ri {
                let (fy, fx) = (di as f64 + cy.fract() - 0.5, dj as f64 + cx.fract() - 0.5);
                if fy * fy + fx * fx > r * r {
                    continue;
                }
                let i = (cy as isize + di).rem_euclid(n as isize) as usize;
                let j = (cx as isize + dj).rem_euclid(n as isize) as usize;
                // Later leaves fall behind earlier ones.
                if img[(i, j)].is_nan() {
                    img[(i, j)] = gray;
                    unfilled -= 1;
                }
            }
        }
        placed += 1;
    }
    img.mapv_inplace(|v| if v.is_nan() { 0.5 } else { v });
    SceneImage::new(img).expect("gray levels are in range")
}
