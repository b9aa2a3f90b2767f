//! Lossless float sidecar for feature maps.
//!
//! Layout: `IIDMAP1`, then height, width and channel count as little-endian
//! `u32`, then `h·w·c` little-endian `f32` values in row-major HWC order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

const MAGIC: &[u8; 7] = b"IIDMAP1";
const HEADER_LEN: usize = MAGIC.len() + 12;

pub fn encode_map(map: &ImageTensor) -> Vec<u8> {
    let (h, w, c) = map.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * map.data().len());
    out.extend_from_slice(MAGIC);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_map(bytes: &[u8], path: &Path) -> Result<ImageTensor> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing IIDMAP1 header"));
    }
    let dim = |i: usize| {
        let at = MAGIC.len() + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
    };
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| bad("dimensions overflow"))?;
    if bytes.len() - HEADER_LEN != 4 * n {
        return Err(bad("payload length does not match dimensions"));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    ImageTensor::new(h, w, c, data)
}

pub fn write_map(map: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_map(map)).map_err(|e| Error::io(path, e))
}

pub fn read_map(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    decode_map(&bytes, path)
}
