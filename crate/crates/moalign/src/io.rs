//! Bit-exact tensor files.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "MOTN" (4 bytes) | version u8 = 1 | dtype u8 (0 = f32, 1 = f64)
//! | ndim u8 | reserved u8 = 0 | ndim x u64 dims | row-major payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use moalign_core::{Scalar, Tensor};

use crate::error::{MotnError, Result};

pub const MAGIC: [u8; 4] = *b"MOTN";
pub const VERSION: u8 = 1;

/// Scalar types the format can carry.
pub trait MotnScalar: Scalar {
    const DTYPE_CODE: u8;
    const DTYPE_NAME: &'static str;
    fn write_le(v: Self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8], i: usize) -> Self;
}

impl MotnScalar for f32 {
    const DTYPE_CODE: u8 = 0;
    const DTYPE_NAME: &'static str = "f32";
    fn write_le(v: Self, out: &mut Vec<u8>) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fn read_le(bytes: &[u8], i: usize) -> Self {
        f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("bounds checked"))
    }
}

impl MotnScalar for f64 {
    const DTYPE_CODE: u8 = 1;
    const DTYPE_NAME: &'static str = "f64";
    fn write_le(v: Self, out: &mut Vec<u8>) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fn read_le(bytes: &[u8], i: usize) -> Self {
        f64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().expect("bounds checked"))
    }
}

#[derive(Debug, Clone)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }
}

pub fn write_tensor<S: MotnScalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    // Tensor construction already rejects zero dims; re-check here so a file
    // can never be produced with an invalid header.
    if t.shape().is_empty() || t.shape().iter().any(|&d| d == 0) {
        return Err(MotnError::InvalidShape {
            path: path.to_path_buf(),
            msg: format!("refusing to write shape {:?}", t.shape()),
        }
        .into());
    }
    let io_err = |e| MotnError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut buf = Vec::with_capacity(8 + 8 * t.shape().len() + t.numel() * 8);
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.push(S::DTYPE_CODE);
    buf.push(t.shape().len() as u8);
    buf.push(0); // reserved
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        S::write_le(v, &mut buf);
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(&buf).map_err(io_err)?;
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<DynTensor> {
    let io_err = |e| MotnError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err)?)
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    parse(path.to_path_buf(), &bytes)
}

/// Typed read; errors if the file holds the other dtype.
pub fn read_tensor_as<S: MotnScalar>(path: &Path) -> Result<Tensor<S>> {
    match (read_tensor(path)?, S::DTYPE_CODE) {
        (DynTensor::F32(t), 0) => Ok(cast_identity(t)),
        (DynTensor::F64(t), 1) => Ok(cast_identity(t)),
        (found, _) => Err(MotnError::DtypeMismatch {
            path: path.to_path_buf(),
            found: match found {
                DynTensor::F32(_) => "f32",
                DynTensor::F64(_) => "f64",
            },
            wanted: S::DTYPE_NAME,
        }
        .into()),
    }
}

fn cast_identity<A: Scalar, B: Scalar>(t: Tensor<A>) -> Tensor<B> {
    // only reached when A == B; the conversion is exact
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|&v| B::from_f64(v.to_f64())).collect(),
    )
    .expect("same shape")
}

fn parse(path: PathBuf, bytes: &[u8]) -> Result<DynTensor> {
    if bytes.len() < 8 {
        return Err(MotnError::Truncated {
            path,
            got: bytes.len(),
            expected: 8,
        }
        .into());
    }
    if bytes[0..4] != MAGIC {
        return Err(MotnError::BadMagic { path }.into());
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(MotnError::UnsupportedVersion { path, version }.into());
    }
    let dtype = bytes[5];
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(MotnError::InvalidShape {
            path,
            msg: "ndim is zero".into(),
        }
        .into());
    }
    let header = 8 + 8 * ndim;
    if bytes.len() < header {
        return Err(MotnError::Truncated {
            path,
            got: bytes.len(),
            expected: header,
        }
        .into());
    }
    let mut shape = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let off = 8 + 8 * d;
        let v = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("bounds checked"));
        if v == 0 {
            return Err(MotnError::InvalidShape {
                path,
                msg: "zero-size dimension".into(),
            }
            .into());
        }
        shape.push(v as usize);
    }
    let numel: usize = shape.iter().product();
    let elem = match dtype {
        0 => 4,
        1 => 8,
        other => return Err(MotnError::UnsupportedDtype { path, dtype: other }.into()),
    };
    let expected = header + numel * elem;
    if bytes.len() != expected {
        return Err(MotnError::Truncated {
            path,
            got: bytes.len(),
            expected,
        }
        .into());
    }
    let payload = &bytes[header..];
    let dt = match dtype {
        0 => DynTensor::F32(
            Tensor::new(shape, (0..numel).map(|i| f32::read_le(payload, i)).collect()).map_err(
                |e| MotnError::InvalidShape {
                    path: PathBuf::new(),
                    msg: e.to_string(),
                },
            )?,
        ),
        _ => DynTensor::F64(
            Tensor::new(shape, (0..numel).map(|i| f64::read_le(payload, i)).collect()).map_err(
                |e| MotnError::InvalidShape {
                    path: PathBuf::new(),
                    msg: e.to_string(),
                },
            )?,
        ),
    };
    Ok(dt)
}
