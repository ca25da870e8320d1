//! Reader and writer for the IDX binary format used by MNIST.
//!
//! Layout: a 4-byte big-endian magic (`0x00000803` for rank-3 unsigned-byte
//! images, `0x00000801` for rank-1 labels), one big-endian `u32` per
//! dimension, then the unsigned-byte payload in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded rank-3 image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: header truncated at byte {at}")))
}

pub fn parse_images(bytes: &[u8], what: &str) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0, what)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{what}: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, what)? as usize;
    let rows = read_u32(bytes, 8, what)? as usize;
    let cols = read_u32(bytes, 12, what)? as usize;
    let need = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format(format!("{what}: dimensions overflow")))?;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::Format(format!(
            "{what}: expected {need} pixel bytes, found {}",
            payload.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8], what: &str) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, what)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{what}: magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, what)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Format(format!(
            "{what}: expected {count} label bytes, found {}",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_images(&bytes, &path.display().to_string())
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&bytes, &path.display().to_string())
}

pub fn write_images(path: &Path, images: &IdxImages) -> Result<()> {
    fs::write(path, encode_images(images)).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_and_wrong_magic_are_format_errors() {
        let img = IdxImages {
            count: 2,
            rows: 2,
            cols: 2,
            pixels: vec![1, 2, 3, 4, 5, 6, 7, 8],
        };
        let bytes = encode_images(&img);
        assert_eq!(parse_images(&bytes, "t").unwrap(), img);
        assert!(matches!(parse_images(&bytes[..20], "t"), Err(Error::Format(_))));
        assert!(matches!(parse_images(&bytes[..6], "t"), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_images(&bad, "t"), Err(Error::Format(_))));
        assert!(matches!(parse_labels(&bytes, "t"), Err(Error::Format(_))));
    }
}
