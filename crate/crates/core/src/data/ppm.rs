//! Binary PPM (P6, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use super::image::Image;
use crate::error::{FdnnError, PpmError, Result};
use crate::tensor::Tensor;

/// Parses a P6 image. Byte `v` maps to `v / 255`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let shown = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(PpmError::UnsupportedMagic(shown));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        skip_space_and_comments(bytes, &mut pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(PpmError::Header(format!("missing header field {}", i + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PpmError::Header("header number out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(PpmError::Header(format!("empty image {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PpmError::Header("no whitespace after maxval".into())),
    }
    let (w, h) = (width as usize, height as usize);
    let expected = 3 * w * h;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut data = vec![0.0; expected];
    for (i, rgb) in payload[..expected].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = rgb[c] as f64 / 255.0;
        }
    }
    Ok(Image::new(Tensor::new(vec![3, h, w], data).expect("finite bytes")).expect("3×H×W"))
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
}

/// Encodes with the header `P6\n<W> <H>\n255\n`; each value x becomes round(x·255).
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image.get(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FdnnError::io(path, e))?;
    decode_ppm(&bytes).map_err(|source| FdnnError::Ppm {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_ppm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|e| FdnnError::io(path, e))
}

/// Rounds every value onto the 1/255 grid, i.e. what a save/load cycle yields.
pub fn quantize(image: &Image) -> Image {
    decode_ppm(&encode_ppm(image)).expect("encoder output is valid")
}
