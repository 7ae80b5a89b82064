//! Raster and mask files: binary graymaps (P5), raw little-endian `f32` with a
//! JSON sidecar, and colour overlays (P6).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ensure_same_dims, BinaryMask, Raster};
use crate::scalar::{lit, Scalar};

/// Decoded binary graymap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Splits a Netpbm header into its first `n` tokens and the offset of the raster data.
fn header_tokens(bytes: &[u8], n: usize) -> Option<(Vec<&[u8]>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(&bytes[start..i]);
    }
    // exactly one whitespace byte separates the header from the data
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return None;
    }
    Some((tokens, i + 1))
}

fn parse_num(path: &Path, tok: &[u8], what: &str) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(path, format!("invalid {what}")))
}

pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<Graymap> {
    let (tokens, offset) =
        header_tokens(bytes, 4).ok_or_else(|| format_err(path, "truncated header"))?;
    if tokens[0] != b"P5" {
        return Err(format_err(path, "not a binary graymap (expected P5)"));
    }
    let width = parse_num(path, tokens[1], "width")?;
    let height = parse_num(path, tokens[2], "height")?;
    let maxval = parse_num(path, tokens[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(path, "empty image"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(
            path,
            format!("maxval {maxval} outside 1..=65535"),
        ));
    }
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let data = &bytes[offset..];
    if data.len() < need {
        return Err(format_err(
            path,
            format!("expected {need} data bytes, found {}", data.len()),
        ));
    }
    let pixels: Vec<u16> = if wide {
        data[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        data[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(v) = pixels.iter().find(|&&v| v as usize > maxval) {
        return Err(format_err(
            path,
            format!("sample {v} exceeds maxval {maxval}"),
        ));
    }
    Ok(Graymap {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn encode_pgm(g: &Graymap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", g.width, g.height, g.maxval).into_bytes();
    if g.maxval > 255 {
        g.pixels
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_be_bytes()));
    } else {
        out.extend(g.pixels.iter().map(|&v| v as u8));
    }
    out
}

pub fn read_pgm(path: &Path) -> Result<Graymap> {
    decode_pgm(path, &fs::read(path)?)
}

pub fn write_pgm(path: &Path, g: &Graymap) -> Result<()> {
    fs::write(path, encode_pgm(g))?;
    Ok(())
}

/// Writes a mask as a graymap with maxval 1.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_pgm(
        path,
        &Graymap {
            width: mask.width(),
            height: mask.height(),
            maxval: 1,
            pixels: mask.values().iter().map(|&v| v as u16).collect(),
        },
    )
}

/// Reads a mask stored with maxval 1, or with values 0 and maxval.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let g = read_pgm(path)?;
    let on = g.maxval;
    if let Some(v) = g.pixels.iter().find(|&&v| v != 0 && v != on) {
        return Err(format_err(
            path,
            format!("mask sample {v} is neither 0 nor {on}"),
        ));
    }
    BinaryMask::new(
        g.height,
        g.width,
        g.pixels.iter().map(|&v| (v == on) as u8).collect(),
    )
}

/// Quantizes `value * scale` to 16 bits, clamping to the representable range.
pub fn write_raster_pgm16<T: Scalar>(path: &Path, raster: &Raster<T>, scale: f64) -> Result<()> {
    let pixels = raster
        .values()
        .iter()
        .map(|v| (v.to_f64().unwrap() * scale).round().clamp(0.0, 65535.0) as u16)
        .collect();
    write_pgm(
        path,
        &Graymap {
            width: raster.width(),
            height: raster.height(),
            maxval: 65535,
            pixels,
        },
    )
}

/// Reads a graymap as a raster scaled to `[0, 1]` by its maxval.
pub fn read_raster_pgm<T: Scalar>(path: &Path) -> Result<Raster<T>> {
    let g = read_pgm(path)?;
    let m = g.maxval as f64;
    Raster::new(
        g.height,
        g.width,
        g.pixels.iter().map(|&v| lit(v as f64 / m)).collect(),
    )
}

/// Geometry sidecar of a raw `f32` raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub height: usize,
    pub width: usize,
    pub resolution_m: Option<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes row-major little-endian `f32` samples plus the JSON sidecar.
pub fn write_raster_f32<T: Scalar>(path: &Path, raster: &Raster<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(raster.values().len() * 4);
    for v in raster.values() {
        bytes.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
    }
    fs::write(path, bytes)?;
    let header = RawHeader {
        height: raster.height(),
        width: raster.width(),
        resolution_m: raster.resolution_m(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

pub fn read_raster_f32<T: Scalar>(path: &Path) -> Result<Raster<T>> {
    let header: RawHeader = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    let n = header.height * header.width;
    if bytes.len() != n * 4 {
        return Err(format_err(
            path,
            format!(
                "{}x{} raster needs {} bytes, found {}",
                header.height,
                header.width,
                n * 4,
                bytes.len()
            ),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    let raster = Raster::new(header.height, header.width, values)
        .map_err(|e| format_err(path, e.to_string()))?;
    match header.resolution_m {
        Some(s) => raster.with_resolution(s),
        None => Ok(raster),
    }
}

/// Reads a raster from a graymap (`.pgm`) or a raw `f32` file with sidecar.
pub fn read_raster<T: Scalar>(path: &Path) -> Result<Raster<T>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_raster_pgm(path),
        _ => read_raster_f32(path),
    }
}

/// Colour composite of two line masks: ground truth only in green, prediction
/// only in red, overlap in yellow, elsewhere black.
pub fn encode_overlay_ppm(pred: &BinaryMask, gt: &BinaryMask) -> Result<Vec<u8>> {
    ensure_same_dims(gt.dims(), pred.dims())?;
    let mut out = format!("P6\n{} {}\n255\n", gt.width(), gt.height()).into_bytes();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        let rgb: [u8; 3] = match (p, g) {
            (1, 1) => [255, 255, 0],
            (1, _) => [255, 0, 0],
            (_, 1) => [0, 255, 0],
            _ => [0, 0, 0],
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

pub fn write_overlay_ppm(path: &Path, pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    fs::write(path, encode_overlay_ppm(pred, gt)?)?;
    Ok(())
}
