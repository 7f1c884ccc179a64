//! `MLT1` tensor files.
//!
//! Layout, all little-endian: magic `MLT1`, u8 dtype (0 = f32), u8 ndim,
//! u16 reserved, ndim u32 dims, row-major payload, then a CRC32 of every
//! preceding byte.

use std::path::Path;

use super::DatasetError;
use crate::tensorkit::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"MLT1";
const DTYPE_F32: u8 = 0;
const FIXED_HEADER: usize = 8;

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let dims = t.dims();
    let mut out = Vec::with_capacity(FIXED_HEADER + 4 * dims.len() + 4 * t.len() + 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(DTYPE_F32);
    out.push(u8::try_from(dims.len()).expect("tensor rank fits in u8"));
    out.extend_from_slice(&0u16.to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&u32::try_from(d).expect("dim fits in u32").to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decodes a tensor, telling apart truncation, foreign files, checksum
/// failures and headers that disagree with their payload.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>, DatasetError> {
    if bytes.len() < FIXED_HEADER {
        return Err(DatasetError::Truncated {
            expected: FIXED_HEADER,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(DatasetError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(DatasetError::UnsupportedDtype(bytes[4]));
    }
    let ndim = bytes[5] as usize;
    let header = FIXED_HEADER + 4 * ndim;
    if bytes.len() < header + 4 {
        return Err(DatasetError::Truncated {
            expected: header + 4,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[FIXED_HEADER..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = count.and_then(|c| c.checked_mul(4)).and_then(|p| p.checked_add(header + 4));

    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let crc_ok = crc32fast::hash(body) == stored;
    match expected {
        Some(e) if e == bytes.len() => {
            if !crc_ok {
                return Err(DatasetError::ChecksumMismatch {
                    stored,
                    computed: crc32fast::hash(body),
                });
            }
        }
        Some(e) if e > bytes.len() && !crc_ok => {
            return Err(DatasetError::Truncated {
                expected: e,
                actual: bytes.len(),
            })
        }
        _ if !crc_ok => {
            return Err(DatasetError::ChecksumMismatch {
                stored,
                computed: crc32fast::hash(body),
            })
        }
        _ => {
            return Err(DatasetError::Corrupt(format!(
                "header dims {dims:?} need {} payload bytes, file holds {}",
                count.map_or("overflowing".to_string(), |c| (4 * c).to_string()),
                bytes.len() - header - 4
            )))
        }
    }
    let data = bytes[header..bytes.len() - 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(dims, data).map_err(|e| DatasetError::Corrupt(e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<(), DatasetError> {
    std::fs::write(path, encode_tensor(t)).map_err(|e| DatasetError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>, DatasetError> {
    let bytes = std::fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| e.at(path))
}

/// Reads a tensor and checks its shape.
pub fn load_feature_map(path: &Path, dims: &[usize]) -> Result<Tensor<f32>, DatasetError> {
    let t = read_tensor(path)?;
    if t.dims() != dims {
        return Err(DatasetError::Corrupt(format!("{}: expected dims {dims:?}, got {:?}", path.display(), t.dims())).at(path));
    }
    Ok(t)
}
