//! "FMX1" binary matrix container.
//!
//! Layout: magic `FMX1`, little-endian `u32` rows, `u32` cols, `u8` kind
//! code, then `rows * cols` little-endian `f64` values in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FMX1";
const HEADER_LEN: usize = 4 + 4 + 4 + 1;

/// Kind code stored in the FMX1 header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MatrixKind {
    Mfcc = 0,
    MfccHires = 1,
    Plp = 2,
    FisherVectors = 3,
    Embeddings = 4,
}

impl MatrixKind {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => MatrixKind::Mfcc,
            1 => MatrixKind::MfccHires,
            2 => MatrixKind::Plp,
            3 => MatrixKind::FisherVectors,
            4 => MatrixKind::Embeddings,
            c => return Err(Error::Format(format!("unknown FMX1 kind code {c}"))),
        })
    }
}

pub fn encode(matrix: &Array2<f64>, kind: MatrixKind) -> Result<Vec<u8>> {
    let (rows, cols) = matrix.dim();
    let rows32 = u32::try_from(rows).map_err(|_| Error::Parameter("too many rows".into()))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::Parameter("too many columns".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    out.push(kind.code());
    for v in matrix.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Array2<f64>, MatrixKind)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing FMX1 header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let kind = MatrixKind::from_code(bytes[12])?;
    let body = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("FMX1 dimensions overflow".into()))?;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "FMX1 body has {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let matrix = Array2::from_shape_vec((rows, cols), values).expect("length checked above");
    Ok((matrix, kind))
}

pub fn write(path: &Path, matrix: &Array2<f64>, kind: MatrixKind) -> Result<()> {
    let bytes = encode(matrix, kind)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Array2<f64>, MatrixKind)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
