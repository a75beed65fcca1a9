//! Acceptance suite. Runs every criterion in sequence at grid 256, prints
//! one PASS/FAIL line per criterion and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use asym_ao::aperture::{make_aperture, ShapeTag};
use asym_ao::config::RunConfig;
use asym_ao::control::{ao_step, run_closed_loop, Estimators, EstimatorKind, LoopConfig, SlmState};
use asym_ao::estimators::{
    estimate_psf_blind, refine_objective, remove_tilt_piston, retrieve_phase_iterative, BlindOptions,
    RetrievalOptions,
};
use asym_ao::fft::{energy, fft2_centered_unitary, fft2_inplace};
use asym_ao::metrics::{gradient_phase_error, kernel_ncc, mtf, strehl_ratio};
use asym_ao::optics::{
    conjugate_flip, flip_distance, image_measurement, psf, pupil_function, psf_from_pupil, resize_centered,
    ConvolutionMode, PhaseMap, Psf,
};
use asym_ao::scenes::dead_leaves;
use asym_ao::zernike::{build_basis, sample_coeffs_with, sample_even_parity, SampleOptions, ZernikeCoeffs};
use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 256;
const PAD: usize = 2;

type Criterion = (&'static str, Duration, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ambiguity() -> Outcome {
    let basis = build_basis(N, 0.9, 6).unwrap();
    let opts = SampleOptions {
        rms_target: 1.0,
        decay: 2.0,
        exclude_tilt: true,
    };
    let phases: Vec<PhaseMap> = (0..100)
        .map(|s| basis.phase_from_coeffs(&sample_even_parity(s, &basis, opts, 0.5).unwrap()).unwrap())
        .collect();
    let mut worst = BTreeMap::new();
    let mut pass = true;
    for shape in [ShapeTag::Disk, ShapeTag::Rectangle, ShapeTag::Triangle] {
        let ap = make_aperture(shape, N, 0.4).unwrap();
        let d: Vec<f64> = phases.iter().map(|p| flip_distance(&ap, p, PAD).unwrap()).collect();
        let (ok, w) = if shape == ShapeTag::Triangle {
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            (min >= 1e-2, min)
        } else {
            let max = d.iter().cloned().fold(0.0, f64::max);
            (max <= 1e-9, max)
        };
        pass &= ok;
        worst.insert(shape.to_string(), w);
    }
    outcome(
        pass,
        format!(
            "disk max {:.2e}, rectangle max {:.2e}, triangle min {:.3e}",
            worst["disk"], worst["rectangle"], worst["triangle"]
        ),
    )
}

fn closed_loop() -> Outcome {
    let cfg = RunConfig::default();
    let ap = cfg.aperture().unwrap();
    let basis = cfg.basis().unwrap();
    let est = cfg.estimators(basis.clone());
    let lc = cfg.loop_config();
    let mut curves = Vec::new();
    for k in 0..cfg.batch.runs {
        let seed = k as u64;
        let opts = SampleOptions {
            rms_target: cfg.batch.rms_of(k),
            ..cfg.zernike.sample_options()
        };
        let phi = basis.phase_from_coeffs(&sample_coeffs_with(seed, &basis, opts)).unwrap();
        let trace = run_closed_loop(&dead_leaves(N, seed), &phi, &ap, &est, &lc, seed).unwrap();
        let s = trace.strehls();
        println!(
            "    run {k:2} rms {:.3} strehl {}",
            opts.rms_target,
            s.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
        );
        curves.push(s);
    }
    let good = curves.iter().filter(|s| s[3] >= 0.9).count();
    let frac = good as f64 / curves.len() as f64;
    let g02 = median(curves.iter().map(|s| s[2] - s[0]).collect());
    let g23 = median(curves.iter().map(|s| s[3] - s[2]).collect());
    outcome(
        frac >= 0.8 && g02 > g23,
        format!(
            "{good}/{} runs end at strehl >= 0.9, median gain 0->2 {g02:.4} vs 2->3 {g23:.4}",
            curves.len()
        ),
    )
}

fn oracle_exactness() -> Outcome {
    let basis = build_basis(N, 0.9, 6).unwrap();
    let est = Estimators::pipeline(basis.clone()).with_kind(EstimatorKind::Oracle);
    let cfg = LoopConfig {
        loops: 1,
        measurements_budget: 2,
        ..LoopConfig::default()
    };
    let mut worst = f64::INFINITY;
    for shape in [ShapeTag::Triangle, ShapeTag::Disk, ShapeTag::Rectangle] {
        let ap = make_aperture(shape, N, 0.4).unwrap();
        for seed in 0..4u64 {
            let opts = SampleOptions {
                rms_target: 0.5 + seed as f64 * 0.5,
                decay: 2.0,
                exclude_tilt: false,
            };
            let phi = basis.phase_from_coeffs(&sample_coeffs_with(seed, &basis, opts)).unwrap();
            let mut frames = Vec::new();
            let (slm, _) = ao_step(
                &dead_leaves(N, seed),
                &phi,
                &SlmState::new(N, 0),
                &ap,
                &est,
                &cfg,
                seed,
                &mut frames,
            )
            .unwrap();
            let residual = phi.add(slm.phase()).unwrap();
            worst = worst.min(strehl_ratio(&psf(&ap, &residual, PAD).unwrap(), &ap).unwrap());
        }
    }
    outcome(worst >= 1.0 - 1e-6, format!("worst strehl after one step {worst:.12}"))
}

fn retrieval_accuracy() -> Outcome {
    const THRESHOLD: f64 = 0.1;
    let basis = build_basis(N, 0.9, 6).unwrap();
    let opts = RetrievalOptions::default();
    let sample = |s: u64| {
        let rms = 0.3 + 0.7 * ((s % 10) as f64 + 0.5) / 10.0;
        let o = SampleOptions {
            rms_target: rms,
            decay: 2.0,
            exclude_tilt: true,
        };
        basis.phase_from_coeffs(&sample_coeffs_with(s, &basis, o)).unwrap()
    };
    let tri = make_aperture(ShapeTag::Triangle, N, 0.4).unwrap();
    let mut tri_worst: f64 = 0.0;
    for s in 0..10 {
        let phi = sample(s);
        let e = retrieve_phase_iterative(&psf(&tri, &phi, PAD).unwrap(), &tri, &basis, &opts).unwrap();
        let truth = remove_tilt_piston(&phi, &tri).unwrap();
        tri_worst = tri_worst.max(gradient_phase_error(&e.phase, &truth, &tri).unwrap());
    }
    let mut sym_worst: f64 = 0.0;
    let mut flagged = true;
    for shape in [ShapeTag::Disk, ShapeTag::Rectangle] {
        let ap = make_aperture(shape, N, 0.4).unwrap();
        for s in 0..5 {
            let phi = sample(s);
            let e = retrieve_phase_iterative(&psf(&ap, &phi, PAD).unwrap(), &ap, &basis, &opts).unwrap();
            let truth = remove_tilt_piston(&phi, &ap).unwrap();
            let direct = gradient_phase_error(&e.phase, &truth, &ap).unwrap();
            let flipped = gradient_phase_error(&conjugate_flip(&e.phase), &truth, &ap).unwrap();
            sym_worst = sym_worst.max(direct.min(flipped));
            flagged &= e.ambiguous;
        }
    }
    outcome(
        tri_worst <= THRESHOLD && sym_worst <= THRESHOLD && flagged,
        format!(
            "triangle worst {tri_worst:.2e}, symmetric worst min-over-flip {sym_worst:.2e}, flagged {flagged}"
        ),
    )
}

fn blind_psf() -> Outcome {
    let basis = build_basis(N, 0.9, 6).unwrap();
    let ap = make_aperture(ShapeTag::Triangle, N, 0.4).unwrap();
    let ks = 63;
    let nccs: Vec<f64> = (0..10u64)
        .map(|s| {
            let o = SampleOptions {
                rms_target: 0.4 + 0.06 * s as f64,
                decay: 2.0,
                exclude_tilt: true,
            };
            let phi = basis.phase_from_coeffs(&sample_coeffs_with(s, &basis, o)).unwrap();
            let h = psf(&ap, &phi, PAD).unwrap();
            let y = image_measurement(&dead_leaves(N, 1000 + s), &h, 0.0, s, ConvolutionMode::Circular).unwrap();
            let truth = Psf::new(resize_centered(&h.kernel().view(), ks, ks)).unwrap().normalized();
            let e = estimate_psf_blind(&y, ks, &BlindOptions::default()).unwrap();
            kernel_ncc(&e.psf.kernel().view(), &truth.kernel().view(), 4).unwrap()
        })
        .collect();
    let min = nccs.iter().cloned().fold(f64::INFINITY, f64::min);
    let med = median(nccs);
    outcome(med >= 0.9, format!("median ncc {med:.4}, min {min:.4}"))
}

fn naive_dft(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (r, c) = a.dim();
    Array2::from_shape_fn((r, c), |(u, v)| {
        let mut acc = Complex64::new(0.0, 0.0);
        for ((i, j), z) in a.indexed_iter() {
            let t = -2.0 * PI * ((u * i) as f64 / r as f64 + (v * j) as f64 / c as f64);
            acc += z * Complex64::from_polar(1.0, t);
        }
        acc
    })
}

fn numerical_foundations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut random = |r: usize, c: usize| {
        Array2::from_shape_fn((r, c), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    };

    let a = random(N, N);
    let parseval_fft = (energy(&fft2_centered_unitary(&a.view()).view()) / energy(&a.view()) - 1.0).abs();
    let ap = make_aperture(ShapeTag::Triangle, N, 0.4).unwrap();
    let basis = build_basis(N, 0.9, 6).unwrap();
    let phi = basis
        .phase_from_coeffs(&sample_coeffs_with(2, &basis, SampleOptions { rms_target: 1.0, decay: 2.0, exclude_tilt: false }))
        .unwrap();
    let pupil = pupil_function(&ap, &phi).unwrap();
    let parseval_psf = (psf_from_pupil(&pupil, PAD).unwrap().energy() / pupil.energy() - 1.0).abs();
    let parseval = parseval_fft.max(parseval_psf);

    let mut dft_err: f64 = 0.0;
    for (r, c) in [(32, 32), (17, 24), (1, 9), (31, 5)] {
        let a = random(r, c);
        let expected = naive_dft(&a);
        let mut got = a.clone();
        fft2_inplace(&mut got);
        let num: f64 = got.iter().zip(&expected).map(|(x, y)| (x - y).norm_sqr()).sum();
        dft_err = dft_err.max((num / energy(&expected.view())).sqrt());
    }

    let g = basis.gram();
    let gram_err = g
        .indexed_iter()
        .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);

    let truth = sample_coeffs_with(3, &basis, SampleOptions { rms_target: 0.8, decay: 2.0, exclude_tilt: true });
    let target = psf(&ap, &basis.phase_from_coeffs(&truth).unwrap(), PAD).unwrap();
    let obj = refine_objective(&target.resized_centered(63).unwrap(), &ap, &basis, PAD).unwrap();
    let x = sample_coeffs_with(9, &basis, SampleOptions { rms_target: 0.6, decay: 2.0, exclude_tilt: true }).values;
    let (_, grad) = obj.value_and_gradient(&x);
    let h = 1e-5;
    let fd: Vec<f64> = (0..x.len())
        .map(|k| {
            let mut p = x.clone();
            let mut m = x.clone();
            p[k] += h;
            m[k] -= h;
            (obj.value(&p) - obj.value(&m)) / (2.0 * h)
        })
        .collect();
    let diff = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
    let grad_err = diff / norm;

    outcome(
        parseval <= 1e-10 && dft_err <= 1e-10 && gram_err <= 1e-3 && grad_err <= 1e-4,
        format!(
            "parseval {parseval:.1e}, fft vs dft {dft_err:.1e}, gram {gram_err:.1e}, gradient {grad_err:.1e}"
        ),
    )
}

fn metric_sanity() -> Outcome {
    let disk = make_aperture(ShapeTag::Disk, N, 0.4).unwrap();
    let bare = psf(&disk, &PhaseMap::zeros(N), PAD).unwrap();
    let profile = mtf(&bare, disk.diameter()).unwrap();
    let mut mtf_err: f64 = 0.0;
    for (nu, c) in profile.radial_frequency.iter().zip(&profile.contrast) {
        let analytic = if *nu < 1.0 {
            2.0 / PI * (nu.acos() - nu * (1.0 - nu * nu).sqrt())
        } else {
            0.0
        };
        mtf_err = mtf_err.max((c - analytic).abs());
    }

    // Defocus scaled to 1 rad RMS over the aperture.
    let basis = build_basis(N, 0.9, 2).unwrap();
    let mut c = ZernikeCoeffs::zeros(&basis);
    c.values[basis.position(2, 0).unwrap()] = 1.0;
    let raw = remove_tilt_piston(&basis.phase_from_coeffs(&c).unwrap(), &disk).unwrap();
    let rms = raw.rms_over(&disk.support().view());
    let defocus = raw.scaled(1.0 / rms);
    let strehl = strehl_ratio(&psf(&disk, &defocus, PAD).unwrap(), &disk).unwrap();
    let strehl_err = (strehl - (-1f64).exp()).abs();

    // Dyadic values keep `phi + c` exact in floating point.
    let tri = make_aperture(ShapeTag::Triangle, N, 0.4).unwrap();
    let phi = build_basis(N, 0.9, 6)
        .map(|b| {
            let o = SampleOptions { rms_target: 1.0, decay: 2.0, exclude_tilt: false };
            b.phase_from_coeffs(&sample_coeffs_with(5, &b, o)).unwrap()
        })
        .unwrap();
    let phi = PhaseMap::new(phi.values().mapv(|v| (v * 1048576.0).round() / 1048576.0));
    let piston = [1.25, -3.5, 0.0078125]
        .iter()
        .map(|k| gradient_phase_error(&phi.offset(*k), &phi, &tri).unwrap())
        .fold(0.0, f64::max);

    outcome(
        mtf_err <= 0.02 && strehl_err <= 0.05 && piston == 0.0,
        format!("mtf max abs error {mtf_err:.4}, defocus strehl {strehl:.4}, piston error {piston:e}"),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    out
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_string_lossy().into_owned();
    let args = ["asym-ao", "run-loop", "--seed", "11", "--rms", "0.8", "--out", &out, "--name", "repro"];
    let mut snaps = Vec::new();
    for _ in 0..2 {
        let code = asym_ao_cli::run(args);
        if code != 0 && code != 2 {
            return outcome(false, format!("run-loop exited with {code}"));
        }
        snaps.push(snapshot(&tmp.path().join("repro")));
    }
    let traces = snaps[0].contains_key("trace.jsonl") && snaps[0].keys().any(|k| k.ends_with(".png"));
    let differing: Vec<&String> = snaps[0]
        .iter()
        .filter(|(k, v)| snaps[1].get(*k) != Some(*v))
        .map(|(k, _)| k)
        .collect();
    outcome(
        traces && differing.is_empty() && snaps[0].len() == snaps[1].len(),
        format!("{} files compared, {} differ", snaps[0].len(), differing.len()),
    )
}

fn main() {
    // `cargo test` passes harness flags; a name filter skips the suite and
    // numeric arguments select criteria.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (numbers, names): (Vec<&String>, Vec<&String>) = args.iter().partition(|a| a.parse::<usize>().is_ok());
    if !names.is_empty() && !names.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let selected: Vec<usize> = numbers.iter().map(|a| a.parse().unwrap()).collect();
    let criteria: [Criterion; 8] = [
        ("1 ambiguity reproduction", Duration::from_secs(60), ambiguity),
        ("2 closed-loop correction", Duration::from_secs(20 * 60), closed_loop),
        ("3 oracle-loop exactness", Duration::from_secs(60), oracle_exactness),
        ("4 phase-retrieval accuracy", Duration::MAX, retrieval_accuracy),
        ("5 blind PSF estimation", Duration::MAX, blind_psf),
        ("6 numerical foundations", Duration::MAX, numerical_foundations),
        ("7 metric sanity", Duration::MAX, metric_sanity),
        ("8 reproducibility", Duration::MAX, reproducibility),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (k, (name, limit, run)) in criteria.into_iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(k + 1)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let o = run();
        let elapsed = t.elapsed();
        let in_time = elapsed <= limit;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = if limit == Duration::MAX {
            String::new()
        } else {
            format!(" (limit {}s)", limit.as_secs())
        };
        println!(
            "{} criterion {name}: {} [{:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
