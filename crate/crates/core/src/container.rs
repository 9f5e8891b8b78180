//! The `STT1` tensor container.
//!
//! ```text
//! offset 0   4 bytes   magic "STT1" (53 54 54 31)
//! offset 4   1 byte    dtype: 0 = f32, 1 = f64, 2 = u8
//! offset 5   1 byte    rank r
//! offset 6   r × u64   dimensions, little-endian
//! then                 row-major payload, little-endian
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"STT1";
const HEADER: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

/// A typed tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl StoredTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        let len = match &data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        };
        if n != len {
            return Err(Error::dim("StoredTensor::new", &shape, &[len]));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::Contract(format!("rank {} exceeds 255", shape.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn from_f64(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: TensorData::F64(t.data().to_vec()),
        }
    }

    /// Rounds each value to `f32`.
    pub fn from_f32(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: TensorData::F32(t.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor::new(self.shape.clone(), data).expect("validated on construction")
    }

    /// Checks dtype and rank, reporting the header offset of the mismatch.
    pub fn expect(self, dtype: DType, rank: usize) -> Result<Self> {
        if self.dtype() != dtype {
            return Err(Error::Mismatch {
                offset: 4,
                expected: format!("{dtype:?}"),
                found: format!("{:?}", self.dtype()),
            });
        }
        if self.shape.len() != rank {
            return Err(Error::Mismatch {
                offset: 5,
                expected: format!("rank {rank}"),
                found: format!("rank {}", self.shape.len()),
            });
        }
        Ok(self)
    }

    pub fn encode(&self) -> Vec<u8> {
        let n: usize = self.shape.iter().product();
        let mut out = Vec::with_capacity(HEADER + 8 * self.shape.len() + n * self.dtype().size());
        out.extend_from_slice(&MAGIC);
        out.push(self.dtype() as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let need = |offset: usize, len: usize| -> Result<()> {
            if bytes.len() < offset + len {
                Err(Error::Truncated {
                    offset: bytes.len() as u64,
                    needed: (offset + len - bytes.len()) as u64,
                })
            } else {
                Ok(())
            }
        };
        need(0, 4)?;
        if bytes[..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {:02x?}", &bytes[..4]),
            });
        }
        need(4, 2)?;
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::Format {
            offset: 4,
            msg: format!("unknown dtype code {}", bytes[4]),
        })?;
        let rank = bytes[5] as usize;
        need(HEADER, 8 * rank)?;
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for i in 0..rank {
            let off = HEADER + 8 * i;
            let d = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
            let d = usize::try_from(d).ok();
            count = match d.and_then(|d| count.checked_mul(d)) {
                Some(c) => c,
                None => {
                    return Err(Error::Format {
                        offset: off as u64,
                        msg: "dimension product overflows".into(),
                    })
                }
            };
            shape.push(d.expect("checked above"));
        }
        let start = HEADER + 8 * rank;
        let payload_len = count.checked_mul(dtype.size()).ok_or_else(|| Error::Format {
            offset: start as u64,
            msg: "payload size overflows".into(),
        })?;
        need(start, payload_len)?;
        let end = start + payload_len;
        if bytes.len() > end {
            return Err(Error::Format {
                offset: end as u64,
                msg: format!("{} trailing bytes", bytes.len() - end),
            });
        }
        let payload = &bytes[start..end];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { shape, data })
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(t: &StoredTensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &t.encode())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    StoredTensor::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = StoredTensor::new(vec![2], TensorData::U8(vec![7, 9])).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[..6], &[0x53, 0x54, 0x54, 0x31, 2, 1]);
        assert_eq!(&bytes[6..14], &2u64.to_le_bytes());
        assert_eq!(&bytes[14..], &[7, 9]);
    }

    #[test]
    fn f32_payload_is_little_endian() {
        let t = StoredTensor::new(vec![1, 1], TensorData::F32(vec![1.0])).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0x00, 0x80, 0x3f]);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let t = StoredTensor::new(vec![3], TensorData::F64(vec![1.0, 2.0, 3.0])).unwrap();
        let bytes = t.encode();
        for cut in [0, 3, 5, 10, bytes.len() - 1] {
            let err = StoredTensor::decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(StoredTensor::decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad_dtype = bytes.clone();
        bad_dtype[4] = 9;
        assert!(matches!(StoredTensor::decode(&bad_dtype), Err(Error::Format { offset: 4, .. })));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(StoredTensor::decode(&trailing), Err(Error::Format { .. })));
    }

    #[test]
    fn expectation_mismatch_names_offset() {
        let t = StoredTensor::new(vec![2, 2], TensorData::U8(vec![0; 4])).unwrap();
        assert!(matches!(t.clone().expect(DType::F32, 2), Err(Error::Mismatch { offset: 4, .. })));
        assert!(matches!(t.expect(DType::U8, 3), Err(Error::Mismatch { offset: 5, .. })));
    }
}
