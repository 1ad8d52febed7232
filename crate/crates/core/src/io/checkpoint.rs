use std::collections::HashSet;
use std::path::Path;

use dr_autodiff::Tensor;

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::refine::{HeadMode, RefineNetwork, UNetConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DRCK";
const META: &str = "meta.config";

/// Serialize named tensors: magic, version, count, then per tensor the
/// name, rank, dims and little-endian f32 values; a CRC32 of everything
/// before it closes the file.
pub fn encode_tensors(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(tensors.len())?.to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidParameter(format!("duplicate tensor name {name}")));
        }
        out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_len(t.rank())?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_len(d)?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidParameter(format!("{n} does not fit a u32 field")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let fail = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported version {version}; supported versions: {CHECKPOINT_VERSION}"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(fail(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }

    let truncated = || fail("truncated tensor record".into());
    let mut cur = Cursor { bytes: body, pos: 8 };
    let count = cur.u32().ok_or_else(truncated)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = cur.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(cur.take(len).ok_or_else(truncated)?)
            .map_err(|_| fail("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(fail(format!("duplicate tensor {name}")));
        }
        let rank = cur.u32().ok_or_else(truncated)? as usize;
        if rank > 4 {
            return Err(fail(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize).ok_or_else(truncated))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| fail(format!("tensor {name} is too large")))?;
        let raw = cur.take(n.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| fail(e.to_string()))?;
        out.push((name, t));
    }
    if cur.pos != body.len() {
        return Err(fail(format!("{} trailing bytes", body.len() - cur.pos)));
    }
    Ok(out)
}

fn network_tensors(net: &RefineNetwork) -> Result<Vec<(String, Tensor<f32>)>> {
    let c = net.config();
    let meta = vec![
        c.levels as f32,
        c.base_channels as f32,
        c.in_channels as f32,
        c.leaky_slope,
        net.head().code() as f32,
    ];
    let mut tensors = vec![(META.to_string(), Tensor::new(&[5], meta)?)];
    tensors.extend(net.parameters().iter().cloned());
    Ok(tensors)
}

pub fn save_checkpoint(net: &RefineNetwork, path: &Path) -> Result<()> {
    write_atomic(path, &encode_tensors(&network_tensors(net)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<RefineNetwork> {
    let fail = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    let mut tensors = decode_tensors(&read_bytes(path)?, path)?;
    let pos = tensors
        .iter()
        .position(|(n, _)| n == META)
        .ok_or_else(|| fail(format!("missing tensor {META}")))?;
    let (_, meta) = tensors.remove(pos);
    let m = meta.data();
    let as_count = |v: f32| -> Result<usize> {
        (v >= 0.0 && v.fract() == 0.0 && v < 1e6)
            .then_some(v as usize)
            .ok_or_else(|| fail(format!("bad architecture field {v}")))
    };
    if m.len() != 5 {
        return Err(fail(format!("{META} has {} entries, expected 5", m.len())));
    }
    let config = UNetConfig {
        levels: as_count(m[0])?,
        base_channels: as_count(m[1])?,
        in_channels: as_count(m[2])?,
        leaky_slope: m[3],
    };
    let head = HeadMode::from_code(as_count(m[4])? as u32).ok_or_else(|| fail(format!("unknown head code {}", m[4])))?;
    RefineNetwork::from_parameters(config, head, tensors).map_err(|e| fail(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::build_unet;

    fn p() -> &'static Path {
        Path::new("mem.drck")
    }

    fn small() -> RefineNetwork {
        let cfg = UNetConfig {
            levels: 1,
            base_channels: 2,
            ..UNetConfig::default()
        };
        build_unet(cfg, HeadMode::Additive, 3).unwrap()
    }

    #[test]
    fn tensors_round_trip_byte_identically() {
        let tensors = network_tensors(&small()).unwrap();
        let bytes = encode_tensors(&tensors).unwrap();
        let back = decode_tensors(&bytes, p()).unwrap();
        assert_eq!(back, tensors);
        assert_eq!(encode_tensors(&back).unwrap(), bytes);
    }

    #[test]
    fn any_flipped_payload_byte_fails_the_crc() {
        let bytes = encode_tensors(&network_tensors(&small()).unwrap()).unwrap();
        for i in (8..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(decode_tensors(&bad, p()).is_err(), "byte {i}");
        }
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        let err = decode_tensors(&bad, p()).unwrap_err().to_string();
        assert!(err.contains("CRC"), "{err}");
    }

    #[test]
    fn unknown_version_names_supported_ones() {
        let mut bytes = encode_tensors(&[]).unwrap();
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = decode_tensors(&bytes, p()).unwrap_err().to_string();
        assert!(err.contains("999") && err.contains("supported versions: 1"), "{err}");
    }

    #[test]
    fn duplicate_names_are_refused() {
        let t = Tensor::zeros(&[1]);
        assert!(encode_tensors(&[("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }
}
