//! Flat tensor files: a small header followed by little-endian `f32` data.
//!
//! Layout: magic `GKDT`, `u32` version, 32-byte config hash, `u32` rank,
//! `rank × u64` dims, then the row-major values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use gkd_core::Tensor;

use crate::error::{format_err, io_err, Result};
use crate::hash::ConfigHash;

const MAGIC: &[u8; 4] = b"GKDT";
const VERSION: u32 = 1;

pub fn encode(t: &Tensor, hash: &ConfigHash) -> Vec<u8> {
    let mut out = Vec::with_capacity(48 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(hash.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize, path: &Path) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(format_err(path, "truncated tensor file"));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

/// Decodes a tensor; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Tensor, ConfigHash)> {
    let mut buf = bytes;
    if take(&mut buf, 4, path)? != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut buf, 4, path)?.try_into().unwrap());
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let hash = ConfigHash::from_bytes(take(&mut buf, 32, path)?.try_into().unwrap());
    let rank = u32::from_le_bytes(take(&mut buf, 4, path)?.try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(format_err(path, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(&mut buf, 8, path)?.try_into().unwrap()) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(path, "shape overflows"))?;
    if buf.len() != 4 * n {
        return Err(format_err(path, format!("expected {} data bytes, found {}", 4 * n, buf.len())));
    }
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let t = Tensor::new(&shape, data).map_err(|e| format_err(path, e.to_string()))?;
    Ok((t, hash))
}

pub fn write(path: &Path, t: &Tensor, hash: &ConfigHash) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode(t, hash)).map_err(io_err(path))
}

pub fn read(path: &Path) -> Result<(Tensor, ConfigHash)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let t = Tensor::new(&[2, 3], vec![0.1, -2.0, 3.5, 1e-3, 0.0, 7.25]).unwrap();
        let h = ConfigHash::of(b"x");
        let (back, hash) = decode(&encode(&t, &h), Path::new("mem")).unwrap();
        assert_eq!(hash, h);
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let t = Tensor::zeros(&[4]);
        let bytes = encode(&t, &ConfigHash::of(b""));
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, Path::new("m")).is_err());
    }
}
