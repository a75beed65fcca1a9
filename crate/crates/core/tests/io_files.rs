use asym_ao::io::{
    read_float_grid, read_gray8, read_gray8_raw, sidecar_path, write_float_grid, write_gray8, write_phase_png,
};
use asym_ao::AoError;
use ndarray::Array2;
use std::fs;

fn ramp() -> Array2<f64> {
    Array2::from_shape_fn((12, 17), |(i, j)| (i as f64 * 0.3 - j as f64 * 0.11).sin() * 3.0 + 1.0)
}

#[test]
fn eight_bit_images_round_trip_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let a = ramp();
    for name in ["a.png", "a.pgm"] {
        let p = dir.path().join(name);
        let scale = write_gray8(&p, &a).unwrap();
        assert!(sidecar_path(&p).exists());
        let back = read_gray8(&p).unwrap();
        let tol = (scale.max - scale.min) / 255.0;
        assert!((back - &a).iter().all(|d| d.abs() <= tol), "{name}");
    }
}

#[test]
fn image_without_sidecar_reads_as_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.pgm");
    write_gray8(&p, &ramp()).unwrap();
    fs::remove_file(sidecar_path(&p)).unwrap();
    let raw = read_gray8_raw(&p).unwrap();
    let back = read_gray8(&p).unwrap();
    assert_eq!(back, raw.mapv(|v| v as f64 / 255.0));
}

#[test]
fn float_grids_are_bit_identical_in_f32() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.aofg");
    let a = ramp();
    write_float_grid(&p, &a).unwrap();
    assert_eq!(fs::metadata(&p).unwrap().len(), 16 + 4 * 12 * 17);
    assert_eq!(read_float_grid(&p).unwrap(), a.mapv(|v| v as f32 as f64));
}

#[test]
fn truncated_and_missing_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.aofg");
    write_float_grid(&p, &ramp()).unwrap();
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_float_grid(&p), Err(AoError::Format(_))));
    let q = dir.path().join("t.png");
    write_gray8(&q, &ramp()).unwrap();
    let bytes = fs::read(&q).unwrap();
    fs::write(&q, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(read_gray8(&q), Err(AoError::Format(_))));
    assert!(matches!(read_float_grid(&dir.path().join("none")), Err(AoError::Io(_))));
}

#[test]
fn phase_render_is_rgb_and_masked() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("phase.png");
    let a = ramp();
    let mask = Array2::from_shape_fn(a.dim(), |(i, _)| if i < 6 { 1.0 } else { 0.0 });
    write_phase_png(&p, &a, Some(&mask)).unwrap();
    let decoder = png::Decoder::new(std::io::Cursor::new(fs::read(&p).unwrap()));
    let reader = decoder.read_info().unwrap();
    assert_eq!(reader.info().color_type, png::ColorType::Rgb);
    assert_eq!((reader.info().width, reader.info().height), (17, 12));
}
