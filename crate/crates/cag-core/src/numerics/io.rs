//! CAGT binary tensor format.
//!
//! Layout (little-endian throughout):
//! magic "CAGT" | version u8=1 | dtype u8 (0=f32, 1=f64, 2=bool-as-u8)
//! | ndim u8 | reserved u8=0 | ndim x u64 dims | row-major payload.

use std::fs;
use std::path::Path;

use super::{DType, NumericsError, Tensor, TensorData};

pub const CAGT_MAGIC: [u8; 4] = *b"CAGT";
pub const CAGT_VERSION: u8 = 1;

/// Serializes a tensor to the CAGT byte layout.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let payload_len = t.len() * t.dtype().size_bytes();
    let mut out = Vec::with_capacity(8 + 8 * t.ndim() + payload_len);
    out.extend_from_slice(&CAGT_MAGIC);
    out.push(CAGT_VERSION);
    out.push(t.dtype().code());
    out.push(t.ndim() as u8);
    out.push(0); // reserved
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t.data() {
        TensorData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::F64(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::Bool(v) => {
            for &x in v {
                out.push(x as u8);
            }
        }
    }
    out
}

/// Parses a tensor from CAGT bytes. Strict: bad magic, unknown dtype code,
/// short payloads, and trailing bytes are all format errors.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, NumericsError> {
    if bytes.len() < 8 {
        return Err(NumericsError::Truncated { expected: 8, got: bytes.len() });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != CAGT_MAGIC {
        return Err(NumericsError::BadMagic { found: magic });
    }
    if bytes[4] != CAGT_VERSION {
        return Err(NumericsError::BadVersion(bytes[4]));
    }
    let dtype = DType::from_code(bytes[5]).ok_or(NumericsError::BadDtypeCode(bytes[5]))?;
    let ndim = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(NumericsError::BadReserved(bytes[7]));
    }
    let header = 8 + 8 * ndim;
    if bytes.len() < header {
        return Err(NumericsError::Truncated { expected: header, got: bytes.len() });
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[8 + 8 * i..16 + 8 * i]);
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let numel: usize = dims.iter().product();
    let expected = header + numel * dtype.size_bytes();
    if bytes.len() < expected {
        return Err(NumericsError::Truncated { expected, got: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(NumericsError::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[header..];
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        ),
        DType::Bool => {
            let mut v = Vec::with_capacity(numel);
            for &b in payload {
                match b {
                    0 => v.push(false),
                    1 => v.push(true),
                    other => return Err(NumericsError::BadBool(other)),
                }
            }
            TensorData::Bool(v)
        }
    };
    Tensor::new(dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<(), NumericsError> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, NumericsError> {
    decode_tensor(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_identity() {
        let t = Tensor::from_f32(vec![3, 4], (0..12).map(|i| i as f32 * 0.5 - 3.0).collect())
            .unwrap();
        let bytes = encode_tensor(&t);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_tensor(&back), bytes);
    }

    #[test]
    fn scalar_tensor_has_single_payload_element() {
        let t = Tensor::from_f64(vec![], vec![2.5]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(bytes.len(), 8 + 8); // header + one f64
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let t = Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_tensor(&t);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&bytes), Err(NumericsError::BadMagic { .. })));
    }

    #[test]
    fn bad_dtype_code_is_a_format_error() {
        let t = Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_tensor(&t);
        bytes[5] = 9;
        assert!(matches!(decode_tensor(&bytes), Err(NumericsError::BadDtypeCode(9))));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let t = Tensor::from_f64(vec![4], vec![1.0; 4]).unwrap();
        let bytes = encode_tensor(&t);
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_tensor(cut), Err(NumericsError::Truncated { .. })));
    }

    #[test]
    fn bool_round_trip_and_strict_bytes() {
        let t = Tensor::from_bool(vec![2, 2], vec![true, false, false, true]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() = 2;
        assert!(matches!(decode_tensor(&bad), Err(NumericsError::BadBool(2))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cagt");
        let t = Tensor::from_f64(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-9, -1e9]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }
}
