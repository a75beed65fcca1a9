use std::hint::black_box;

use asym_ao::aperture::{make_aperture, ShapeTag};
use asym_ao::estimators::{retrieve_phase_iterative, RetrievalOptions};
use asym_ao::fft::{fft2_with, Exec};
use asym_ao::optics::{flip_distance, psf};
use asym_ao::par;
use asym_ao::zernike::{build_basis, sample_coeffs};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use num_complex::Complex64;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn fft(c: &mut Criterion) {
    let mut group = c.benchmark_group("fft2_512");
    let a = Array2::from_shape_fn((512, 512), |(i, j)| Complex64::new((i * 7 + j) as f64 % 13.0, 0.0));
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut x = a.clone();
                fft2_with(&mut x, exec);
                black_box(x)
            })
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieval_multistart_128");
    group.sample_size(10);
    let ap = make_aperture(ShapeTag::Triangle, 128, 0.4).unwrap();
    let basis = build_basis(128, 0.9, 6).unwrap();
    let phase = basis.phase_from_coeffs(&sample_coeffs(3, 1.0, &basis, 2.0)).unwrap();
    let measured = psf(&ap, &phase, 2).unwrap();
    for (name, exec) in MODES {
        let opts = RetrievalOptions {
            refine: None,
            exec,
            ..RetrievalOptions::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| black_box(retrieve_phase_iterative(&measured, &ap, &basis, &opts).unwrap()))
        });
    }
    group.finish();
}

fn flip_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("flip_distance_batch");
    group.sample_size(10);
    let n = 128;
    let ap = make_aperture(ShapeTag::Triangle, n, 0.4).unwrap();
    let basis = build_basis(n, 0.9, 6).unwrap();
    let phases: Vec<_> = (0..32)
        .map(|s| basis.phase_from_coeffs(&sample_coeffs(s, 1.0, &basis, 2.0)).unwrap())
        .collect();
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, phases.len()), &phases, |b, phases| {
            b.iter(|| black_box(par::map_with(exec, phases.iter().collect(), |p| flip_distance(&ap, p, 2).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, fft, retrieval, flip_batch);
criterion_main!(benches);
