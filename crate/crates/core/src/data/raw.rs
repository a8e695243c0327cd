//! Generic raw-tensor dataset files.
//!
//! Pixel file: `"FTNR"` | ndim u32 LE | dims u32 LE * ndim | u8 pixels.
//! Label file: one u8 per example, no header.

use std::fs;
use std::path::Path;

use super::{Dataset, DEFAULT_CLASSES};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FTNR";

fn image_shape(shape: &[usize]) -> Result<Vec<usize>> {
    match shape {
        [_, h, w] => Ok(vec![1, *h, *w]),
        [_, c, h, w] => Ok(vec![*c, *h, *w]),
        _ => Err(Error::InvalidTensor(format!(
            "raw tensor shape must be [N,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

/// Loads a raw tensor file whose header must agree with `shape`.
pub fn load_raw_tensor(path: &Path, shape: &[usize], labels_path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let labels = fs::read(labels_path)?;
    let what = "raw tensor";
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            what: what.into(),
            expected: 8,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            what: what.into(),
            expected: u32::from_be_bytes(*MAGIC),
            found: u32::from_be_bytes(bytes[..4].try_into().unwrap()),
        });
    }
    let ndim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated {
            what: what.into(),
            expected: header as u64,
            found: bytes.len() as u64,
        });
    }
    let dims: Vec<usize> = bytes[8..header]
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    // [N, H, W] and [N, 1, H, W] describe the same layout
    let canon = |d: &[usize]| -> Vec<usize> {
        match d {
            [n, h, w] => vec![*n, 1, *h, *w],
            _ => d.to_vec(),
        }
    };
    if canon(&dims) != canon(shape) {
        return Err(Error::ShapeMismatch {
            context: format!("header of {}", path.display()),
            expected: shape.to_vec(),
            found: dims,
        });
    }
    let image = image_shape(shape)?;
    if shape[0] == 0 {
        return Err(Error::EmptyDataset);
    }
    let expected: usize = shape.iter().product();
    let pixels = &bytes[header..];
    if pixels.len() != expected {
        return Err(Error::Truncated {
            what: what.into(),
            expected: (header + expected) as u64,
            found: bytes.len() as u64,
        });
    }
    if labels.len() != shape[0] {
        return Err(Error::CountMismatch {
            images: shape[0],
            labels: labels.len(),
        });
    }
    let classes = labels
        .iter()
        .map(|&l| usize::from(l) + 1)
        .max()
        .unwrap_or(0)
        .max(DEFAULT_CLASSES);
    Dataset::from_bytes(&image, pixels, &labels, classes)
}

/// Writes a dataset in the raw format, quantizing pixels to bytes.
pub fn write_raw_tensor(dataset: &Dataset, path: &Path, labels_path: &Path) -> Result<()> {
    let mut shape = vec![dataset.len()];
    shape.extend_from_slice(dataset.image_shape());
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + shape.iter().product::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in &shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let mut labels = Vec::with_capacity(dataset.len());
    for ex in dataset.examples() {
        out.extend(ex.image().data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        let label = u8::try_from(ex.true_label())
            .map_err(|_| Error::InvalidTensor(format!("label {} does not fit in a byte", ex.true_label())))?;
        labels.push(label);
    }
    fs::write(path, out)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_header(path: &Path, shape: &[u32], payload: &[u8]) {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(payload);
        fs::write(path, out).unwrap();
    }

    #[test]
    fn zeros_file() {
        let dir = tempfile::tempdir().unwrap();
        let (p, l) = (dir.path().join("x"), dir.path().join("y"));
        write_header(&p, &[2, 3, 8, 8], &[0; 2 * 3 * 64]);
        fs::write(&l, [1u8, 5]).unwrap();
        let ds = load_raw_tensor(&p, &[2, 3, 8, 8], &l).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_shape(), &[3, 8, 8]);
        assert!(ds.examples().iter().all(|e| e.image().data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_examples_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (p, l) = (dir.path().join("x"), dir.path().join("y"));
        write_header(&p, &[0, 1, 4, 4], &[]);
        fs::write(&l, []).unwrap();
        assert!(matches!(
            load_raw_tensor(&p, &[0, 1, 4, 4], &l),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn length_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let (p, l) = (dir.path().join("x"), dir.path().join("y"));
        write_header(&p, &[2, 1, 2, 2], &[0; 7]);
        fs::write(&l, [0u8, 1]).unwrap();
        assert!(matches!(load_raw_tensor(&p, &[2, 1, 2, 2], &l), Err(Error::Truncated { .. })));
        write_header(&p, &[2, 1, 2, 2], &[0; 8]);
        fs::write(&l, [0u8]).unwrap();
        assert!(matches!(load_raw_tensor(&p, &[2, 1, 2, 2], &l), Err(Error::CountMismatch { .. })));
        fs::write(&l, [0u8, 1]).unwrap();
        assert!(matches!(load_raw_tensor(&p, &[2, 2, 2, 1], &l), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (p, l) = (dir.path().join("x"), dir.path().join("y"));
        let pixels: Vec<u8> = (0..3 * 2 * 5 * 5).map(|i| (i * 37 % 256) as u8).collect();
        let ds = Dataset::from_bytes(&[2, 5, 5], &pixels, &[0, 9, 4], 10).unwrap();
        write_raw_tensor(&ds, &p, &l).unwrap();
        let back = load_raw_tensor(&p, &[3, 2, 5, 5], &l).unwrap();
        assert_eq!(back, ds);
    }
}
