//! Netpbm image files: 8-bit binary PGM (P5) and PPM (P6).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parses an 8-bit binary PGM into a `[1,1,H,W]` tensor scaled to `[0,1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::format("not a binary PGM (expected P5 magic)"));
    }
    let width = parse_num(next_token(bytes, &mut pos)?)?;
    let height = parse_num(next_token(bytes, &mut pos)?)?;
    let maxval = parse_num(next_token(bytes, &mut pos)?)?;
    if width == 0 || height == 0 {
        return Err(Error::format("PGM with zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("unsupported PGM maxval {maxval}; only 8-bit images are read")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    let raster =
        bytes.get(pos..pos + n).ok_or_else(|| Error::format(format!("PGM raster truncated: need {n} bytes")))?;
    let scale = 1.0 / maxval as f64;
    Tensor::new(vec![1, 1, height, width], raster.iter().map(|&b| (b as f64 * scale).min(1.0)).collect())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::format("PGM header truncated")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|c| !c.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_num(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(format!("bad PGM header field {:?}", String::from_utf8_lossy(tok))))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1,1,H,W]` (or `[H,W]`) tensor in `[0,1]` as an 8-bit PGM.
pub fn encode_pgm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w) = image_hw(image)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Writes an RGB image given as three `[0,1]` planes of length `H*W`.
pub fn encode_ppm(width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<Vec<u8>> {
    if rgb.len() != width * height {
        return Err(Error::dim("encode_ppm", format!("{} pixels for {width}x{height}", rgb.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        out.extend(px.iter().map(|&c| to_byte(c)));
    }
    Ok(out)
}

fn image_hw(image: &Tensor<f64>) -> Result<(usize, usize)> {
    match image.shape() {
        [1, 1, h, w] | [h, w] => Ok((*h, *w)),
        s => Err(Error::dim("pgm", format!("expected [1,1,H,W] image, got {s:?}"))),
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor<f64>) -> Result<()> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}
