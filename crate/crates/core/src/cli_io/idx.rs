//! IDX tensors as used by the MNIST distribution, optionally gzip-wrapped.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::DataError;
use crate::autodiff::Tensor;

pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = fs::read(path).map_err(|e| DataError::io(path, e))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| DataError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an in-memory IDX stream. Image payloads (`0x803`) are scaled by
/// `1/255`; every other element type keeps its raw byte value.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor, DataError> {
    let word = |i: usize| -> Result<u32, DataError> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or(DataError::Truncated { needed: 4 * i + 4, found: bytes.len() })
    };
    let magic = word(0)?;
    let ndims = match magic {
        LABEL_MAGIC => 1,
        IMAGE_MAGIC => 3,
        other => return Err(DataError::BadMagic(other)),
    };
    let dims = (1..=ndims).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let header = 4 * (ndims + 1);
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count {
        return Err(DataError::SizeMismatch { expected: count, found: payload.len() });
    }
    let scale = if magic == IMAGE_MAGIC { 1.0 / 255.0 } else { 1.0 };
    let data = payload.iter().map(|&b| b as f64 * scale).collect();
    Ok(Tensor::new(dims, data)?)
}

pub fn read_idx(path: &Path) -> Result<Tensor, DataError> {
    parse_idx(&read_bytes(path)?)
}

/// Encodes raw `u8` elements under `magic`; gzip when the path ends in `.gz`.
pub fn write_idx(path: &Path, magic: u32, dims: &[usize], payload: &[u8]) -> Result<(), DataError> {
    let mut bytes = magic.to_be_bytes().to_vec();
    for &d in dims {
        bytes.extend_from_slice(&(d as u32).to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| DataError::io(path, e))?;
        bytes = enc.finish().map_err(|e| DataError::io(path, e))?;
    }
    super::atomic_write(path, &bytes)
}
