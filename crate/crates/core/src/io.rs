//! File formats: 32-bit float grids, 8-bit grayscale PGM/PNG with a min/max
//! sidecar, and cyclic-colormap phase renders.
//!
//! Float grid layout, little-endian: `b"AOFG"`, width `u32`, height `u32`,
//! reserved `u32` (zero), then `width * height` `f32` samples in row-major
//! order.

use std::f64::consts::PI;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{AoError, Result};

pub const FLOAT_GRID_MAGIC: [u8; 4] = *b"AOFG";
const HEADER_LEN: usize = 16;

/// Serializes `a` as a float grid. Samples are narrowed to `f32`.
pub fn float_grid_bytes(a: &Array2<f64>) -> Vec<u8> {
    let (h, w) = a.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * w * h);
    out.extend_from_slice(&FLOAT_GRID_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in a.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn parse_float_grid(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(AoError::Format(format!(
            "float grid truncated: {} header bytes",
            bytes.len()
        )));
    }
    if bytes[0..4] != FLOAT_GRID_MAGIC {
        return Err(AoError::Format("float grid magic mismatch".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as usize;
    let (w, h) = (word(4), word(8));
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| AoError::Format(format!("float grid {w}x{h} too large")))?;
    if bytes.len() != need {
        return Err(AoError::Format(format!(
            "float grid {w}x{h} needs {need} bytes, file has {}",
            bytes.len()
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((h, w), values).map_err(|e| AoError::Format(e.to_string()))
}

pub fn write_float_grid(path: &Path, a: &Array2<f64>) -> Result<()> {
    fs::write(path, float_grid_bytes(a))?;
    Ok(())
}

pub fn read_float_grid(path: &Path) -> Result<Array2<f64>> {
    parse_float_grid(&fs::read(path)?)
}

/// Value range mapped onto 0..=255 when writing an 8-bit image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scale8 {
    pub min: f64,
    pub max: f64,
}

impl Scale8 {
    /// Range of the finite samples of `a`; a flat image gets a unit range.
    pub fn of(a: &Array2<f64>) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in a.iter().filter(|v| v.is_finite()) {
            min = min.min(*v);
            max = max.max(*v);
        }
        if !min.is_finite() {
            return Self { min: 0.0, max: 1.0 };
        }
        if max <= min {
            max = min + 1.0;
        }
        Self { min, max }
    }

    pub fn encode(&self, a: &Array2<f64>) -> Vec<u8> {
        let span = self.max - self.min;
        a.iter()
            .map(|v| {
                let t = ((v - self.min) / span).clamp(0.0, 1.0);
                if t.is_nan() {
                    0
                } else {
                    (t * 255.0).round() as u8
                }
            })
            .collect()
    }

    pub fn decode(&self, bytes: &[u8], dim: (usize, usize)) -> Array2<f64> {
        let span = self.max - self.min;
        Array2::from_shape_fn(dim, |(i, j)| self.min + span * bytes[i * dim.1 + j] as f64 / 255.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gray8Format {
    Pgm,
    Png,
}

impl Gray8Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
            Some("pgm") => Ok(Self::Pgm),
            Some("png") => Ok(Self::Png),
            _ => Err(AoError::Format(format!(
                "{}: expected a .pgm or .png file",
                path.display()
            ))),
        }
    }
}

/// `image.png` → `image.png.range.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".range.json");
    PathBuf::from(s)
}

pub fn pgm_bytes(pixels: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Binary (P5) 8-bit PGM. Comments in the header are skipped.
pub fn parse_pgm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(AoError::Format("PGM header truncated".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(AoError::Format("not a binary PGM (P5)".into()));
    }
    let num = |t: String| t.parse::<usize>().map_err(|_| AoError::Format(format!("bad PGM header field {t:?}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(AoError::Format(format!("only 8-bit PGM supported, maxval {maxval}")));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() < w * h {
        return Err(AoError::Format(format!(
            "PGM truncated: {w}x{h} needs {} bytes, found {}",
            w * h,
            data.len()
        )));
    }
    Ok((data[..w * h].to_vec(), w, h))
}

pub fn png_bytes(pixels: &[u8], width: usize, height: usize, color: png::ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| AoError::Format(e.to_string()))?;
        writer.write_image_data(pixels).map_err(|e| AoError::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes a PNG to 8-bit gray. Color images are reduced to their mean
/// channel value; alpha is dropped.
pub fn parse_png_gray(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let fmt = |e: png::DecodingError| AoError::Format(format!("PNG: {e}"));
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| AoError::Format("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let color = match info.color_type {
        png::ColorType::Rgb | png::ColorType::Rgba => 3,
        _ => 1,
    };
    let line = info.line_size;
    let mut out = Vec::with_capacity(w * h);
    for i in 0..h {
        let row = &buf[i * line..i * line + w * channels];
        for px in row.chunks_exact(channels) {
            let sum: u32 = px[..color].iter().map(|v| *v as u32).sum();
            out.push(((sum + color as u32 / 2) / color as u32) as u8);
        }
    }
    Ok((out, w, h))
}

/// Writes `a` as an 8-bit image scaled over its own range and records the
/// range in the sidecar next to it.
pub fn write_gray8(path: &Path, a: &Array2<f64>) -> Result<Scale8> {
    write_gray8_scaled(path, a, Scale8::of(a))
}

/// Like [`write_gray8`] with a fixed range; samples outside it are clamped.
pub fn write_gray8_scaled(path: &Path, a: &Array2<f64>, scale: Scale8) -> Result<Scale8> {
    let (h, w) = a.dim();
    let pixels = scale.encode(a);
    let bytes = match Gray8Format::from_path(path)? {
        Gray8Format::Pgm => pgm_bytes(&pixels, w, h),
        Gray8Format::Png => png_bytes(&pixels, w, h, png::ColorType::Grayscale)?,
    };
    fs::write(path, bytes)?;
    let sidecar = serde_json::to_string_pretty(&scale).expect("plain data");
    fs::write(sidecar_path(path), sidecar + "\n")?;
    Ok(scale)
}

/// Raw 8-bit samples of a PGM or PNG file.
pub fn read_gray8_raw(path: &Path) -> Result<Array2<u8>> {
    let bytes = fs::read(path)?;
    let (px, w, h) = match Gray8Format::from_path(path)? {
        Gray8Format::Pgm => parse_pgm(&bytes)?,
        Gray8Format::Png => parse_png_gray(&bytes)?,
    };
    Array2::from_shape_vec((h, w), px).map_err(|e| AoError::Format(e.to_string()))
}

/// Reads an 8-bit image. Values are restored through the sidecar range when
/// one exists and mapped to [0, 1] otherwise.
pub fn read_gray8(path: &Path) -> Result<Array2<f64>> {
    let raw = read_gray8_raw(path)?;
    let side = sidecar_path(path);
    let scale = if side.exists() {
        serde_json::from_str(&fs::read_to_string(&side)?)
            .map_err(|e| AoError::Format(format!("{}: {e}", side.display())))?
    } else {
        Scale8 { min: 0.0, max: 1.0 }
    };
    let bytes: Vec<u8> = raw.iter().copied().collect();
    Ok(scale.decode(&bytes, raw.dim()))
}

/// Cyclic hue wheel over [−π, π): −π is red, then yellow, green, cyan,
/// blue, magenta, and back to red at +π. Phases are wrapped first.
pub fn cyclic_color(phase: f64) -> [u8; 3] {
    let wrapped = (phase + PI).rem_euclid(2.0 * PI);
    let h = wrapped / (2.0 * PI) * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let q = |v: f64| (v * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// RGB PNG of a phase map; samples where `mask` is zero are black.
pub fn write_phase_png(path: &Path, phase: &Array2<f64>, mask: Option<&Array2<f64>>) -> Result<()> {
    let (h, w) = phase.dim();
    let mut px = Vec::with_capacity(3 * w * h);
    for ((i, j), v) in phase.indexed_iter() {
        if mask.is_some_and(|m| m[(i, j)] <= 0.0) {
            px.extend_from_slice(&[0, 0, 0]);
        } else {
            px.extend_from_slice(&cyclic_color(*v));
        }
    }
    fs::write(path, png_bytes(&px, w, h, png::ColorType::Rgb)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_grid_header_layout() {
        let a = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let b = float_grid_bytes(&a);
        assert_eq!(&b[0..4], b"AOFG");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(&b[12..16], &[0, 0, 0, 0]);
        assert_eq!(b.len(), 16 + 24);
        assert_eq!(parse_float_grid(&b).unwrap(), a);
    }

    #[test]
    fn bad_float_grids_are_format_errors() {
        let b = float_grid_bytes(&Array2::zeros((4, 4)));
        assert!(matches!(parse_float_grid(&b[..10]), Err(AoError::Format(_))));
        assert!(matches!(parse_float_grid(&b[..b.len() - 1]), Err(AoError::Format(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(parse_float_grid(&bad), Err(AoError::Format(_))));
    }

    #[test]
    fn colormap_is_cyclic() {
        assert_eq!(cyclic_color(-PI), cyclic_color(PI));
        assert_eq!(cyclic_color(-PI), [255, 0, 0]);
        assert_eq!(cyclic_color(0.0), [0, 255, 255]);
        assert_eq!(cyclic_color(0.3), cyclic_color(0.3 + 2.0 * PI));
    }

    #[test]
    fn pgm_parse_skips_comments() {
        let mut b = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[7, 9]);
        assert_eq!(parse_pgm(&b).unwrap(), (vec![7, 9], 2, 1));
        assert!(parse_pgm(&b[..b.len() - 1]).is_err());
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
    }
}
