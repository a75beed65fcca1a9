use asym_ao::aperture::{make_aperture, Aperture, ShapeTag};
use asym_ao::control::{run_closed_loop, EstimatorKind, Estimators, LoopConfig};
use asym_ao::estimators::{
    estimate_psf_blind, patchify, refine_phase_diversity, remove_tilt_piston, retrieve_phase_iterative, BlindOptions,
    DiversityFrame, DiversityOptions, RetrievalOptions,
};
use asym_ao::metrics::{gradient_phase_error, kernel_ncc};
use asym_ao::optics::{
    conjugate_flip, image_measurement, psf, resize_centered, ConvolutionMode, Measurement, PhaseMap, Psf,
};
use asym_ao::scenes::dead_leaves;
use asym_ao::zernike::{build_basis, sample_coeffs, sample_coeffs_with, SampleOptions, ZernikeBasis, ZernikeCoeffs};

const N: usize = 64;

fn setup(shape: ShapeTag) -> (Aperture, ZernikeBasis) {
    (make_aperture(shape, N, 0.4).unwrap(), build_basis(N, 0.9, 5).unwrap())
}

fn tilt_free(seed: u64, rms: f64, basis: &ZernikeBasis) -> PhaseMap {
    let opts = SampleOptions {
        rms_target: rms,
        decay: 2.0,
        exclude_tilt: true,
    };
    basis.phase_from_coeffs(&sample_coeffs_with(seed, basis, opts)).unwrap()
}

#[test]
fn retrieval_of_a_bare_aperture_psf_is_flat() {
    let (ap, basis) = setup(ShapeTag::Triangle);
    let h = psf(&ap, &PhaseMap::zeros(N), 2).unwrap();
    let e = retrieve_phase_iterative(&h, &ap, &basis, &RetrievalOptions::default()).unwrap();
    assert!(e.phase.rms_over(&ap.support().view()) < 1e-3);
    assert!(!e.ambiguous);
}

#[test]
fn triangle_round_trip() {
    let (ap, basis) = setup(ShapeTag::Triangle);
    for seed in 0..3 {
        let phi = tilt_free(seed, 0.8, &basis);
        let e = retrieve_phase_iterative(&psf(&ap, &phi, 2).unwrap(), &ap, &basis, &RetrievalOptions::default())
            .unwrap();
        let truth = remove_tilt_piston(&phi, &ap).unwrap();
        let err = gradient_phase_error(&e.phase, &truth, &ap).unwrap();
        let flipped = gradient_phase_error(&conjugate_flip(&e.phase), &truth, &ap).unwrap();
        assert!(err < 0.01, "seed {seed}: {err}");
        assert!(err < flipped, "seed {seed}: picked the flip");
    }
}

#[test]
fn disk_retrieval_is_flagged_and_right_up_to_flip() {
    let (ap, basis) = setup(ShapeTag::Disk);
    let phi = tilt_free(4, 0.8, &basis);
    let e = retrieve_phase_iterative(&psf(&ap, &phi, 2).unwrap(), &ap, &basis, &RetrievalOptions::default()).unwrap();
    assert!(e.ambiguous);
    let truth = remove_tilt_piston(&phi, &ap).unwrap();
    let direct = gradient_phase_error(&e.phase, &truth, &ap).unwrap();
    let flipped = gradient_phase_error(&conjugate_flip(&e.phase), &truth, &ap).unwrap();
    assert!(direct.min(flipped) < 0.01);
}

#[test]
fn retrieval_is_deterministic() {
    let (ap, basis) = setup(ShapeTag::Triangle);
    let h = psf(&ap, &tilt_free(7, 1.0, &basis), 2).unwrap();
    let opts = RetrievalOptions::default();
    let a = retrieve_phase_iterative(&h, &ap, &basis, &opts).unwrap();
    let b = retrieve_phase_iterative(&h, &ap, &basis, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn blind_estimate_correlates_with_truth_and_is_deterministic() {
    let n = 128;
    let ap = make_aperture(ShapeTag::Triangle, n, 0.4).unwrap();
    let basis = build_basis(n, 0.9, 5).unwrap();
    let phi = basis.phase_from_coeffs(&sample_coeffs(2, 0.8, &basis, 2.0)).unwrap();
    let h = psf(&ap, &phi, 2).unwrap();
    let y = image_measurement(&dead_leaves(n, 3), &h, 0.0, 0, ConvolutionMode::Circular).unwrap();
    let ks = 31;
    let opts = BlindOptions::default();
    let a = estimate_psf_blind(&y, ks, &opts).unwrap();
    let b = estimate_psf_blind(&y, ks, &opts).unwrap();
    assert_eq!(a, b);
    assert!((a.psf.energy() - 1.0).abs() < 1e-9);
    let truth = Psf::new(resize_centered(&h.kernel().view(), ks, ks)).unwrap().normalized();
    let ncc = kernel_ncc(&a.psf.kernel().view(), &truth.kernel().view(), 3).unwrap();
    assert!(ncc > 0.8, "ncc {ncc}");
}

#[test]
fn diversity_recovers_phase_from_unknown_scene() {
    let n = 64;
    let ap = make_aperture(ShapeTag::Triangle, n, 0.4).unwrap();
    let basis = build_basis(n, 0.9, 4).unwrap();
    let phi = tilt_free(1, 0.8, &basis);
    let scene = dead_leaves(n, 9);
    let diversities = [PhaseMap::zeros(n), tilt_free(2, 0.6, &basis).scaled(-1.0)];
    let measurements: Vec<_> = diversities
        .iter()
        .map(|d| {
            let h = psf(&ap, &phi.add(d).unwrap(), 2).unwrap();
            image_measurement(&scene, &h, 0.0, 0, ConvolutionMode::Circular).unwrap()
        })
        .collect();
    let frames: Vec<DiversityFrame> = measurements
        .iter()
        .zip(&diversities)
        .map(|(measurement, diversity)| DiversityFrame { measurement, diversity })
        .collect();
    let opts = DiversityOptions {
        gamma: 1e-6,
        ..DiversityOptions::default()
    };
    let e = refine_phase_diversity(&frames, &ap, &basis, &[ZernikeCoeffs::zeros(&basis)], &opts).unwrap();
    let truth = remove_tilt_piston(&phi, &ap).unwrap();
    let err = gradient_phase_error(&e.phase, &truth, &ap).unwrap();
    let start = gradient_phase_error(&PhaseMap::zeros(n), &truth, &ap).unwrap();
    assert!(err < 0.1 * start, "error {err} from {start}");
}

#[test]
fn geometric_estimator_halves_residual_each_step() {
    let n = 64;
    let ap = make_aperture(ShapeTag::Triangle, n, 0.4).unwrap();
    let basis = build_basis(n, 0.9, 4).unwrap();
    let phi = basis.phase_from_coeffs(&sample_coeffs(3, 1.0, &basis, 2.0)).unwrap();
    let est = Estimators::pipeline(basis).with_kind(EstimatorKind::Geometric);
    let cfg = LoopConfig {
        loops: 3,
        measurements_budget: 4,
        ..LoopConfig::default()
    };
    let trace = run_closed_loop(&dead_leaves(n, 0), &phi, &ap, &est, &cfg, 0).unwrap();
    assert_eq!(trace.records.len(), 4);
    assert_eq!(trace.measurements_formed, 4);
    let support = ap.support();
    let rms: Vec<f64> = trace
        .records
        .iter()
        .map(|r| phi.add(&r.slm_phase).unwrap().rms_over(&support.view()))
        .collect();
    for w in rms.windows(2) {
        assert!((w[1] / w[0] - 0.5).abs() < 1e-12, "{rms:?}");
    }
}

#[test]
fn full_frame_splits_into_sixteen_patches() {
    let y = Measurement::new(dead_leaves(256, 0).pixels().clone(), 0.0).unwrap();
    let stack = patchify(&y, 64, 64).unwrap();
    assert_eq!(stack.len(), 16);
    assert_eq!((stack.layout.rows, stack.layout.cols), (4, 4));
}
