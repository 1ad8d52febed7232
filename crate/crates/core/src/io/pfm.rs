use std::path::Path;

use super::header::HeaderReader;
use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::geometry::ScalarField;

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        format: "PFM",
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Encode a field as single-channel little-endian PFM. Invalid pixels are
/// stored as NaN; valid values are narrowed to f32.
pub fn encode_pfm(field: &ScalarField) -> Vec<u8> {
    let (w, h) = field.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for y in (0..h).rev() {
        for x in 0..w {
            let v = field.get(x, y).map_or(f32::NAN, |v| v as f32);
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decode a single-channel PFM. `path` is only used in error messages.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<ScalarField> {
    let mut header = HeaderReader::new(bytes);
    match header.token() {
        Some("Pf") => {}
        Some("PF") => return Err(malformed(path, "three-channel PF is not a scalar field")),
        other => return Err(malformed(path, format!("bad magic {other:?}"))),
    }
    let mut dim = |what: &str| -> Result<usize> {
        header
            .token()
            .and_then(|t| t.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| malformed(path, format!("bad {what}")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let scale: f64 = header
        .token()
        .and_then(|t| t.parse().ok())
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| malformed(path, "bad scale"))?;
    let little = scale < 0.0;
    let payload = header.payload().ok_or_else(|| malformed(path, "header not terminated"))?;
    let needed = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| malformed(path, "dimensions overflow"))?;
    if payload.len() < needed {
        return Err(malformed(
            path,
            format!("truncated payload: {} of {needed} bytes", payload.len()),
        ));
    }

    let mut values = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for (row, chunk) in payload[..needed].chunks_exact(4 * w).enumerate() {
        let y = h - 1 - row;
        for (x, b) in chunk.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            if v.is_finite() {
                values[y * w + x] = v as f64;
                valid[y * w + x] = true;
            }
        }
    }
    ScalarField::new(w, h, values, valid)
}

pub fn read_pfm(path: &Path) -> Result<ScalarField> {
    decode_pfm(&read_bytes(path)?, path)
}

pub fn write_pfm(field: &ScalarField, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pfm(field))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p() -> &'static Path {
        Path::new("mem.pfm")
    }

    #[test]
    fn random_field_round_trips_bit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let field = ScalarField::from_fn(4, 3, |_, _| {
            rng.gen_bool(0.8).then(|| rng.gen_range(-50.0f32..50.0) as f64)
        });
        let bytes = encode_pfm(&field);
        let back = decode_pfm(&bytes, p()).unwrap();
        assert_eq!(back.valid(), field.valid());
        for (a, b) in back.values().iter().zip(field.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(encode_pfm(&back), bytes);
    }

    #[test]
    fn header_layout_and_row_order() {
        let field = ScalarField::from_fn(4, 3, |x, y| Some((10 * y + x) as f64));
        let bytes = encode_pfm(&field);
        assert!(bytes.starts_with(b"Pf\n4 3\n-1.0\n"));
        let payload = &bytes[12..];
        assert_eq!(payload.len(), 48);
        // first stored row is the bottom one
        assert_eq!(f32::from_le_bytes(payload[0..4].try_into().unwrap()), 20.0);
    }

    #[test]
    fn big_endian_twin_reads_the_same() {
        let field = ScalarField::from_fn(3, 2, |x, y| Some(x as f64 * 0.25 - y as f64));
        let le = encode_pfm(&field);
        let mut be = b"Pf\n3 2\n1.0\n".to_vec();
        for chunk in le[12..].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            be.extend_from_slice(&v.to_be_bytes());
        }
        let a = decode_pfm(&le, p()).unwrap();
        let b = decode_pfm(&be, p()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = b"Pf\n4 3\n-1.0\n".to_vec();
        bytes.extend(std::iter::repeat(0u8).take(47));
        let err = decode_pfm(&bytes, p()).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn malformed_headers_are_rejected() {
        for bad in [&b"P5\n4 3\n-1.0\n"[..], b"Pf\n4\n", b"Pf\n4 3\n0\n", b"PF\n1 1\n-1.0\n"] {
            assert!(decode_pfm(bad, p()).is_err());
        }
    }

    #[test]
    fn non_finite_values_become_invalid() {
        let mut bytes = b"Pf\n2 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&f32::INFINITY.to_le_bytes());
        bytes.extend_from_slice(&2.5f32.to_le_bytes());
        let f = decode_pfm(&bytes, p()).unwrap();
        assert_eq!(f.valid(), &[false, true]);
        assert_eq!(f.get(1, 0), Some(2.5));
    }
}
