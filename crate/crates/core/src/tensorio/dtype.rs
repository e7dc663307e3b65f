use std::fmt;
use std::str::FromStr;

use half::{bf16, f16};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

/// Elements per parallel work unit for the elementwise conversions.
const CHUNK: usize = 1 << 16;

/// Storage dtypes accepted in a checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn element_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = FormatError;

    fn from_str(s: &str) -> Result<Self, FormatError> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(FormatError::UnknownDtype(other.to_string())),
        }
    }
}

/// Widens a little-endian buffer of `dtype` elements to F32. Exact for every input,
/// including infinities and NaN payload classes.
pub fn to_f32(bytes: &[u8], dtype: Dtype) -> Result<Vec<f32>> {
    let size = dtype.element_size();
    if !bytes.len().is_multiple_of(size) {
        return Err(Error::invalid(format!(
            "buffer of {} bytes is not a whole number of {dtype} elements",
            bytes.len()
        )));
    }
    let mut out = vec![0f32; bytes.len() / size];
    out.par_chunks_mut(CHUNK)
        .zip(bytes.par_chunks(CHUNK * size))
        .for_each(|(dst, src)| widen_into(src, dtype, dst));
    Ok(out)
}

fn widen_into(src: &[u8], dtype: Dtype, dst: &mut [f32]) {
    match dtype {
        Dtype::F32 => {
            for (d, c) in dst.iter_mut().zip(src.chunks_exact(4)) {
                *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        Dtype::F16 => {
            for (d, c) in dst.iter_mut().zip(src.chunks_exact(2)) {
                *d = f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32();
            }
        }
        Dtype::BF16 => {
            for (d, c) in dst.iter_mut().zip(src.chunks_exact(2)) {
                *d = bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32();
            }
        }
    }
}

/// Narrows F32 values to `dtype` with round-to-nearest-even and encodes them little-endian.
pub fn from_f32(values: &[f32], dtype: Dtype) -> Vec<u8> {
    let size = dtype.element_size();
    let mut out = vec![0u8; values.len() * size];
    out.par_chunks_mut(CHUNK * size)
        .zip(values.par_chunks(CHUNK))
        .for_each(|(dst, src)| match dtype {
            Dtype::F32 => {
                for (c, v) in dst.chunks_exact_mut(4).zip(src) {
                    c.copy_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F16 => {
                for (c, v) in dst.chunks_exact_mut(2).zip(src) {
                    c.copy_from_slice(&f16::from_f32(*v).to_bits().to_le_bytes());
                }
            }
            Dtype::BF16 => {
                for (c, v) in dst.chunks_exact_mut(2).zip(src) {
                    c.copy_from_slice(&bf16::from_f32(*v).to_bits().to_le_bytes());
                }
            }
        });
    out
}
