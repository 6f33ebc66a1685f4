//! Tensor checkpoint file.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   4 bytes  "VDLF"
//! version u32      currently 1
//! count   u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (utf-8)
//!   dtype    u8   0 = f32, 1 = f64
//!   rank     u8
//!   dims     u32 * rank
//!   data     little-endian scalars, row-major
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"VDLF";
pub const VERSION: u32 = 1;

/// A tensor as read back from a checkpoint, before dtype resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl RawTensor {
    pub fn to_tensor<F: Scalar>(&self) -> Result<Tensor<F>> {
        if self.dtype != F::DTYPE {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} stored as {:?}, requested {:?}",
                self.name,
                self.dtype,
                F::DTYPE
            )));
        }
        let width = F::byte_width();
        let data: Vec<F> = self
            .data
            .chunks_exact(width)
            .map(F::from_le_slice)
            .collect();
        Ok(Tensor::from_vec(&self.dims, data))
    }
}

pub fn encode<F: Scalar>(tensors: &[(String, Tensor<F>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.tag());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<RawTensor>> {
    let malformed = |reason: String| Error::MalformedFile {
        path: "<checkpoint>".into(),
        reason,
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(malformed(format!(
                "truncated at byte {} (wanted {} more)",
                *pos, n
            )));
        }
        let slice = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(malformed("bad magic".into()));
    }
    let version = read_u32(&mut pos)?;
    if version != VERSION {
        return Err(malformed(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = read_u32(&mut pos)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| malformed("tensor name is not utf-8".into()))?
            .to_string();
        let dtype = Dtype::from_tag(take(&mut pos, 1)?[0])
            .ok_or_else(|| malformed(format!("unknown dtype tag for {name}")))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = read_u32(&mut pos)? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| malformed(format!("dimension overflow in {name}")))?;
            dims.push(d);
        }
        let width = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let byte_len = numel
            .checked_mul(width)
            .ok_or_else(|| malformed(format!("data size overflow in {name}")))?;
        let data = take(&mut pos, byte_len)?.to_vec();
        tensors.push(RawTensor {
            name,
            dtype,
            dims,
            data,
        });
    }
    if pos != bytes.len() {
        return Err(malformed(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - pos
        )));
    }
    Ok(tensors)
}

pub fn save<F: Scalar>(path: &Path, tensors: &[(String, Tensor<F>)]) -> Result<()> {
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<RawTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::MalformedFile { reason, .. } => Error::MalformedFile {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a.weight".into(), Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.25, -0.125])),
            ("a.bias".into(), Tensor::vector(&[0.5, -0.5])),
            ("scalar".into(), Tensor::scalar(42.0)),
        ]
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = encode(&sample());
        let raw = decode(&bytes).unwrap();
        let round: Vec<(String, Tensor<f32>)> = raw
            .iter()
            .map(|r| (r.name.clone(), r.to_tensor().unwrap()))
            .collect();
        assert_eq!(encode(&round), bytes);
    }

    #[test]
    fn values_survive_round_trip() {
        let original = sample();
        let raw = decode(&encode(&original)).unwrap();
        for (orig, loaded) in original.iter().zip(&raw) {
            assert_eq!(orig.0, loaded.name);
            assert_eq!(orig.1, loaded.to_tensor::<f32>().unwrap());
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(decode(&bad_version).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode(&trailing).is_err());
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let bytes = encode(&sample());
        let raw = decode(&bytes).unwrap();
        assert!(raw[0].to_tensor::<f64>().is_err());
    }

    #[test]
    fn f64_tensors_round_trip() {
        let tensors = vec![("x".to_string(), Tensor::<f64>::vector(&[1.0, 2.0, 3.0]))];
        let raw = decode(&encode(&tensors)).unwrap();
        assert_eq!(raw[0].to_tensor::<f64>().unwrap(), tensors[0].1);
    }
}
