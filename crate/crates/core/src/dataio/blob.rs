//! `SWKT` tensor blobs.
//!
//! Layout (little-endian, no padding):
//!
//! | bytes        | field                      |
//! |--------------|----------------------------|
//! | 4            | magic `SWKT`               |
//! | 4            | version `u32` = 1          |
//! | 1            | dtype `u8` (1=f32, 2=u8)   |
//! | 1            | ndim `u8`                  |
//! | 8 × ndim     | dims `u64`                 |
//! | ...          | row-major data             |

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"SWKT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl BlobData {
    fn dtype(&self) -> u8 {
        match self {
            BlobData::F32(_) => 1,
            BlobData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub dims: Vec<usize>,
    pub data: BlobData,
}

impl Blob {
    pub fn f32(dims: &[usize], data: Vec<f32>) -> Self {
        Self {
            dims: dims.to_vec(),
            data: BlobData::F32(data),
        }
    }

    pub fn u8(dims: &[usize], data: Vec<u8>) -> Self {
        Self {
            dims: dims.to_vec(),
            data: BlobData::U8(data),
        }
    }

    pub fn into_f32(self, path: &Path) -> Result<Vec<f32>> {
        match self.data {
            BlobData::F32(v) => Ok(v),
            BlobData::U8(_) => Err(blob_err(path, "expected dtype f32, found u8")),
        }
    }

    pub fn into_u8(self, path: &Path) -> Result<Vec<u8>> {
        match self.data {
            BlobData::U8(v) => Ok(v),
            BlobData::F32(_) => Err(blob_err(path, "expected dtype u8, found f32")),
        }
    }
}

fn blob_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Blob {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn encode(blob: &Blob) -> Result<Vec<u8>> {
    let n: usize = blob.dims.iter().product();
    if n != blob.data.len() {
        return Err(Error::Shape {
            op: "encode_blob",
            lhs: blob.dims.clone(),
            rhs: vec![blob.data.len()],
        });
    }
    let ndim = u8::try_from(blob.dims.len())
        .map_err(|_| Error::invalid("encode_blob", "more than 255 dimensions"))?;
    let elem = match blob.data {
        BlobData::F32(_) => 4,
        BlobData::U8(_) => 1,
    };
    let mut out = Vec::with_capacity(10 + 8 * blob.dims.len() + n * elem);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(blob.data.dtype());
    out.push(ndim);
    for &d in &blob.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &blob.data {
        BlobData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        BlobData::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

/// Decode a blob; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Blob> {
    if bytes.len() < 10 {
        return Err(blob_err(
            path,
            format!("header needs at least 10 bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(blob_err(path, "bad magic, expected SWKT"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(blob_err(
            path,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let dtype = bytes[8];
    let ndim = bytes[9] as usize;
    let header = 10 + 8 * ndim;
    if bytes.len() < header {
        return Err(blob_err(
            path,
            format!("header needs {header} bytes, found {}", bytes.len()),
        ));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 10 + 8 * i;
            u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes")) as usize
        })
        .collect();
    let n: usize = dims.iter().product();
    let elem = match dtype {
        1 => 4,
        2 => 1,
        other => return Err(blob_err(path, format!("unknown dtype {other}"))),
    };
    let payload = &bytes[header..];
    if payload.len() != n * elem {
        return Err(blob_err(
            path,
            format!(
                "length mismatch: dims {dims:?} need {} data bytes, found {}",
                n * elem,
                payload.len()
            ),
        ));
    }
    let data = match dtype {
        1 => BlobData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        _ => BlobData::U8(payload.to_vec()),
    };
    Ok(Blob { dims, data })
}

pub fn write(path: &Path, blob: &Blob) -> Result<()> {
    fsutil::write_atomic(path, &encode(blob)?)
}

pub fn read(path: &Path) -> Result<Blob> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let b = Blob::u8(&[2, 1], vec![7, 9]);
        let bytes = encode(&b).unwrap();
        let mut expect = b"SWKT".to_vec();
        expect.extend_from_slice(&[1, 0, 0, 0, 2, 2]);
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&[7, 9]);
        assert_eq!(bytes, expect);
    }

    #[test]
    fn truncated_payload_reports_length() {
        let b = Blob::f32(&[3], vec![1.0, 2.0, 3.0]);
        let mut bytes = encode(&b).unwrap();
        bytes.pop();
        let msg = decode(&bytes, Path::new("x.swkt")).unwrap_err().to_string();
        assert!(msg.contains("length mismatch"), "{msg}");
        assert!(msg.contains("12"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode(&Blob::u8(&[1], vec![0])).unwrap();
        bytes[0] = b'X';
        assert!(decode(&bytes, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn f32_roundtrip_bit_exact(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff))
                .collect();
            let b = Blob::f32(&dims, data);
            let back = decode(&encode(&b).unwrap(), Path::new("p")).unwrap();
            let (BlobData::F32(x), BlobData::F32(y)) = (&b.data, &back.data) else { panic!() };
            prop_assert_eq!(&b.dims, &back.dims);
            prop_assert!(x.iter().zip(y).all(|(a, c)| a.to_bits() == c.to_bits()));
        }

        #[test]
        fn u8_roundtrip(data in proptest::collection::vec(any::<u8>(), 0..64)) {
            let b = Blob::u8(&[data.len()], data);
            prop_assert_eq!(decode(&encode(&b).unwrap(), Path::new("p")).unwrap(), b);
        }
    }
}
