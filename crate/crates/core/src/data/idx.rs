//! IDX files as distributed for MNIST and Fashion-MNIST.

use std::fs;
use std::path::Path;

use super::{Dataset, DEFAULT_CLASSES};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            what: what.into(),
            expected: (at + 4) as u64,
            found: bytes.len() as u64,
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic {
            what: what.into(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let expected = header + len;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what: what.into(),
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    Ok(&bytes[header..expected])
}

/// Returns `(rows, cols, pixels)` of an IDX3 image file.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let what = "idx images";
    check_magic(bytes, IMAGES_MAGIC, what)?;
    let count = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    Ok((rows, cols, payload(bytes, 16, count * rows * cols, what)?))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let what = "idx labels";
    check_magic(bytes, LABELS_MAGIC, what)?;
    let count = be_u32(bytes, 4, what)? as usize;
    payload(bytes, 8, count, what)
}

/// Loads an image/label file pair; pixels are scaled from bytes to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    let (rows, cols, pixels) = parse_images(&image_bytes)?;
    let labels = parse_labels(&label_bytes)?;
    let per_image = rows * cols;
    let images = pixels.len().checked_div(per_image).unwrap_or(0);
    if images != labels.len() {
        return Err(Error::CountMismatch {
            images,
            labels: labels.len(),
        });
    }
    let classes = labels
        .iter()
        .map(|&l| usize::from(l) + 1)
        .max()
        .unwrap_or(0)
        .max(DEFAULT_CLASSES);
    Dataset::from_bytes(&[1, rows, cols], pixels, labels, classes)
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
