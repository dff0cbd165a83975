//! Binary PGM (P5) mask images.

use std::fs;
use std::path::Path;

use gkd_core::Tensor;

use crate::error::{format_err, io_err, Result};
use crate::hash::ConfigHash;

/// Encodes an `[H, W]` or `[1, H, W]` map in `[0, 1]`; values are scaled to 0..=255.
pub fn encode(map: &Tensor, hash: &ConfigHash) -> Option<Vec<u8>> {
    let (h, w) = match *map.shape() {
        [h, w] | [1, h, w] => (h, w),
        _ => return None,
    };
    let mut out = format!("P5\n# config_hash {hash}\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Some(out)
}

pub fn write(path: &Path, map: &Tensor, hash: &ConfigHash) -> Result<()> {
    let bytes = encode(map, hash).ok_or_else(|| format_err(path, format!("cannot rasterize shape {:?}", map.shape())))?;
    fs::write(path, bytes).map_err(io_err(path))
}
