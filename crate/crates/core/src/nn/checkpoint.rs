//! Binary checkpoint format for [`ParameterSet`].
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "FTNP" | version u32 | fingerprint u64 | entry count u32
//! per entry: layer index u32 | ndim u32 | dims u32 * ndim | values f64 * prod(dims)
//! ```
//!
//! Each parameterized layer contributes two entries with the same layer
//! index: its weight tensor followed by its bias tensor.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::arch::NetworkArchitecture;
use super::params::{ParamEntry, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FTNP";
pub const VERSION: u32 = 1;

pub fn write_params<W: Write>(params: &ParameterSet, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&params.fingerprint().to_le_bytes())?;
    out.write_all(&((params.entries().len() * 2) as u32).to_le_bytes())?;
    for entry in params.entries() {
        for tensor in [&entry.weight, &entry.bias] {
            out.write_all(&(entry.layer_index as u32).to_le_bytes())?;
            out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in tensor.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn save_params(params: &ParameterSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_params(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                what: "checkpoint".into(),
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, layer: u32) -> Result<(u32, Tensor)> {
        let index = self.u32()?;
        if index != layer {
            return Err(Error::Checkpoint(format!(
                "expected entry for layer {layer}, found layer {index}"
            )));
        }
        let ndim = self.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let values = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((index, Tensor::new(dims, values)?))
    }
}

/// Reads a checkpoint and validates it against `arch`.
pub fn read_params<R: Read>(arch: &NetworkArchitecture, mut input: R) -> Result<ParameterSet> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint".into(),
            expected: u32::from_be_bytes(*MAGIC),
            found: u32::from_be_bytes(magic.try_into().unwrap()),
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let fingerprint = cur.u64()?;
    if fingerprint != arch.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: arch.fingerprint(),
            found: fingerprint,
        });
    }
    let count = cur.u32()? as usize;
    let layers = arch.parameterized_layers();
    if count != layers.len() * 2 {
        return Err(Error::Checkpoint(format!(
            "expected {} entries, found {count}",
            layers.len() * 2
        )));
    }
    let mut entries = Vec::with_capacity(layers.len());
    for &layer in &layers {
        let (_, weight) = cur.tensor(layer as u32)?;
        let (_, bias) = cur.tensor(layer as u32)?;
        entries.push(ParamEntry {
            layer_index: layer,
            weight,
            bias,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    ParameterSet::from_entries(arch, entries)
}

pub fn load_params(arch: &NetworkArchitecture, path: &Path) -> Result<ParameterSet> {
    read_params(arch, fs::File::open(path)?)
}
