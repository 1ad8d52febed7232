use std::path::Path;

use super::header::HeaderReader;
use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::imaging::Image;

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        format: "PNM",
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Byte for an intensity in [0, 1], rounding halves up.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

/// Binary PGM for one channel, PPM for three.
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let (w, h) = img.dims();
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(img.values().iter().map(|&v| quantize(v)));
    out
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut header = HeaderReader::new(bytes);
    let channels = match header.token() {
        Some("P5") => 1,
        Some("P6") => 3,
        other => return Err(malformed(path, format!("unsupported magic {other:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        header
            .token()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| malformed(path, format!("bad {what}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(malformed(path, format!("unsupported maxval {maxval}, only 255 is read")));
    }
    if w == 0 || h == 0 {
        return Err(malformed(path, "empty image"));
    }
    let payload = header.payload().ok_or_else(|| malformed(path, "header not terminated"))?;
    let needed = w * h * channels;
    if payload.len() < needed {
        return Err(malformed(
            path,
            format!("truncated payload: {} of {needed} bytes", payload.len()),
        ));
    }
    let values = payload[..needed].iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(w, h, channels, values)
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    decode_pnm(&read_bytes(path)?, path)
}

pub fn write_pnm(img: &Image, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pnm(img))
}

/// Validity mask as a PGM with 0 for invalid and 255 for valid.
pub fn write_mask(mask: &[bool], width: usize, height: usize, path: &Path) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} entries for {width}x{height}",
            mask.len()
        )));
    }
    let img = Image::new(width, height, 1, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    write_pnm(&img, path)
}

pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = read_pnm(path)?;
    if img.channels() != 1 {
        return Err(malformed(path, "mask must be single-channel"));
    }
    let (w, h) = img.dims();
    Ok((w, h, img.values().iter().map(|&v| v >= 0.5).collect()))
}
