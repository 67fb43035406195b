//! Flat binary parameter files with a JSON manifest alongside.
//!
//! Binary layout: `b"ATD3"`, one version byte, a little-endian `u32` matrix
//! count, one `(u32 rows, u32 cols)` pair per matrix, then every value as a
//! little-endian `f64`, matrices in declaration order, each row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Matrix, NumericsError, ParamSet, Scalar};

pub const MAGIC: &[u8; 4] = b"ATD3";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub format: String,
    pub version: u8,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub matrices: Vec<ShapeEntry>,
}

pub fn encode<T: Scalar>(params: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 8 * params.len() + 8 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for m in params.mats() {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    }
    for m in params.mats() {
        for v in m.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], NumericsError> {
    if bytes.len() < n {
        return Err(NumericsError::Format("truncated file".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8]) -> Result<usize, NumericsError> {
    let b = take(bytes, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

pub fn decode<T: Scalar>(mut bytes: &[u8]) -> Result<Vec<Matrix<T>>, NumericsError> {
    let bytes = &mut bytes;
    if take(bytes, 4)? != MAGIC {
        return Err(NumericsError::Format("bad magic".into()));
    }
    let version = take(bytes, 1)?[0];
    if version != FORMAT_VERSION {
        return Err(NumericsError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(bytes)?;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        shapes.push((read_u32(bytes)?, read_u32(bytes)?));
    }
    let mut mats = Vec::with_capacity(count);
    for (rows, cols) in shapes {
        let raw = take(bytes, rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        mats.push(Matrix::new(rows, cols, data)?);
    }
    if !bytes.is_empty() {
        return Err(NumericsError::Format(format!("{} trailing bytes", bytes.len())));
    }
    Ok(mats)
}

/// Writes `bin` and its manifest `json`. `meta` is stored verbatim in the manifest.
pub fn save_params<T: Scalar>(
    params: &ParamSet<T>,
    meta: serde_json::Value,
    bin: &Path,
    json: &Path,
) -> Result<(), NumericsError> {
    fs::write(bin, encode(params))?;
    let manifest = ParamManifest {
        format: "ATD3".into(),
        version: FORMAT_VERSION,
        meta,
        matrices: params
            .iter()
            .map(|(name, m)| ShapeEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    fs::write(json, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a parameter file and its manifest, checking that shapes agree.
pub fn load_params<T: Scalar>(bin: &Path, json: &Path) -> Result<(ParamSet<T>, ParamManifest), NumericsError> {
    let manifest: ParamManifest = serde_json::from_str(&fs::read_to_string(json)?)?;
    let mats = decode::<T>(&fs::read(bin)?)?;
    if mats.len() != manifest.matrices.len() {
        return Err(NumericsError::ParamCount {
            expected: manifest.matrices.len(),
            got: mats.len(),
        });
    }
    let mut set = ParamSet::new();
    for (entry, m) in manifest.matrices.iter().zip(mats) {
        if m.shape() != (entry.rows, entry.cols) {
            return Err(NumericsError::ParamShape {
                name: entry.name.clone(),
                expected: (entry.rows, entry.cols),
                got: m.shape(),
            });
        }
        set.push(entry.name.clone(), m);
    }
    Ok((set, manifest))
}
