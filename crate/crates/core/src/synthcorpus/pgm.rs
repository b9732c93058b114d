//! Binary 8-bit PGM (`P5`) images.

use std::fs;
use std::path::Path;

use crate::error::{Result, RtnError};
use crate::gridmath::Grid;

/// Maps an intensity in `[0, 1]` to its stored byte.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a `P5` file into `(width, height, pixels)`; a maxval other than
/// 255 is rescaled to 8 bits.
pub fn decode(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    if bytes.get(..2) != Some(b"P5") {
        return Err("not a binary PGM (missing P5 magic)".into());
    }
    pos += 2;
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?;
        *field = text.parse().map_err(|_| format!("bad PGM header field at byte {start}"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("PGM header not terminated".into());
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM maxval {maxval}"));
    }
    let data = &bytes[pos..];
    if data.len() < w * h {
        return Err(format!("PGM data truncated: {} of {} bytes", data.len(), w * h));
    }
    let pixels = data[..w * h]
        .iter()
        .map(|&b| if maxval == 255 { b } else { ((b as f64 / maxval as f64) * 255.0).round() as u8 })
        .collect();
    Ok((w, h, pixels))
}

/// Reads `(width, height)` from the header only.
pub fn read_extent(path: &Path) -> Result<(usize, usize)> {
    let (w, h, _) = read(path)?;
    Ok((w, h))
}

pub fn read(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| RtnError::io(path, e))?;
    decode(&bytes).map_err(|reason| RtnError::Input(format!("{}: {reason}", path.display())))
}

/// Loads a PGM as a `[1, 1, H, W]` grid of intensities in `[0, 1]`.
pub fn read_grid(path: &Path) -> Result<Grid> {
    let (w, h, pixels) = read(path)?;
    Grid::new(vec![1, 1, h, w], pixels.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Writes a `[1, 1, H, W]` (or `[H, W]`) grid of intensities.
pub fn write_grid(path: &Path, image: &Grid) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s {
        [1, 1, h, w] | [h, w] => (*h, *w),
        _ => return Err(RtnError::Shape(format!("cannot store {s:?} as a grayscale image"))),
    };
    let pixels: Vec<u8> = image.values().iter().map(|&v| quantize(v)).collect();
    fs::write(path, encode(w, h, &pixels)).map_err(|e| RtnError::io(path, e))
}
