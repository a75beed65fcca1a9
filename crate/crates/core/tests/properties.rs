use asym_ao::aperture::{make_aperture, ShapeTag};
use asym_ao::control::quantize;
use asym_ao::estimators::remove_tilt_piston;
use asym_ao::io::{float_grid_bytes, parse_float_grid, Scale8};
use asym_ao::optics::{conjugate_flip, psf, PhaseMap};
use asym_ao::zernike::{build_basis, sample_coeffs, ZernikeCoeffs};
use ndarray::Array2;
use proptest::prelude::*;

fn grid(n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-4.0f64..4.0, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conjugate_flip_is_an_involution(a in grid(9)) {
        let p = PhaseMap::new(a);
        prop_assert_eq!(conjugate_flip(&conjugate_flip(&p)), p);
    }

    #[test]
    fn psf_energy_equals_aperture_energy(seed in 0u64..1000, rms in 0.0f64..2.0) {
        let ap = make_aperture(ShapeTag::Triangle, 32, 0.4).unwrap();
        let basis = build_basis(32, 0.9, 4).unwrap();
        let phi = basis.phase_from_coeffs(&sample_coeffs(seed, rms, &basis, 2.0)).unwrap();
        let h = psf(&ap, &phi, 2).unwrap();
        prop_assert!(h.kernel().iter().all(|v| *v >= 0.0));
        prop_assert!((h.energy() / ap.energy() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psf_ignores_piston(seed in 0u64..1000, piston in -10.0f64..10.0) {
        let ap = make_aperture(ShapeTag::Triangle, 32, 0.4).unwrap();
        let basis = build_basis(32, 0.9, 4).unwrap();
        let phi = basis.phase_from_coeffs(&sample_coeffs(seed, 1.0, &basis, 2.0)).unwrap();
        let a = psf(&ap, &phi, 2).unwrap();
        let b = psf(&ap, &phi.offset(piston), 2).unwrap();
        let d = (a.kernel() - b.kernel()).iter().map(|v| v.abs()).fold(0.0, f64::max);
        prop_assert!(d <= 1e-12 * a.peak());
    }

    #[test]
    fn quantization_is_idempotent_and_bounded(a in grid(6), levels in 1u32..64) {
        let p = PhaseMap::new(a);
        let q = quantize(&p, levels);
        prop_assert_eq!(quantize(&q, levels), q.clone());
        let step = 2.0 * std::f64::consts::PI / levels as f64;
        let err = (q.values() - p.values()).iter().map(|v| v.abs()).fold(0.0, f64::max);
        prop_assert!(err <= 0.5 * step + 1e-12);
    }

    #[test]
    fn tilt_piston_removal_is_idempotent(seed in 0u64..1000) {
        let ap = make_aperture(ShapeTag::Rectangle, 32, 0.4).unwrap();
        let basis = build_basis(32, 0.9, 3).unwrap();
        let phi = basis.phase_from_coeffs(&sample_coeffs(seed, 1.0, &basis, 2.0)).unwrap();
        let once = remove_tilt_piston(&phi, &ap).unwrap();
        let twice = remove_tilt_piston(&once, &ap).unwrap();
        let d = (once.values() - twice.values()).iter().map(|v| v.abs()).fold(0.0, f64::max);
        prop_assert!(d < 1e-12);
    }

    #[test]
    fn float_grid_round_trip_is_exact_in_f32(a in grid(7)) {
        let back = parse_float_grid(&float_grid_bytes(&a)).unwrap();
        let expected = a.mapv(|v| v as f32 as f64);
        prop_assert_eq!(back, expected);
    }

    #[test]
    fn eight_bit_round_trip_within_one_level(a in grid(5)) {
        let s = Scale8::of(&a);
        let back = s.decode(&s.encode(&a), a.dim());
        let tol = (s.max - s.min) / 255.0 * 0.5 + 1e-12;
        prop_assert!((back - &a).iter().all(|d| d.abs() <= tol));
    }

    #[test]
    fn coefficients_round_trip_through_phase(seed in 0u64..1000) {
        let basis = build_basis(48, 0.9, 4).unwrap();
        let c = sample_coeffs(seed, 1.0, &basis, 2.0);
        let fit: ZernikeCoeffs = basis.fit_coeffs(&basis.phase_from_coeffs(&c).unwrap()).unwrap();
        let d = c.values.iter().zip(&fit.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(d < 1e-6);
    }
}
