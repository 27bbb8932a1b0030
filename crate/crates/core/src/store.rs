// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary vector store.
//!
//! Layout (little-endian): magic `LVEC`, version u32, dim u32, count u64,
//! then `count` records of a u32 prompt id followed by `dim` f32 values.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{BridgeError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LVEC";
const VERSION: u32 = 1;
const KIND: &str = "vector store";
/// Bytes before the first record.
pub const HEADER_LEN: usize = 20;

/// Prompt ids and their vectors, one row per record.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorStore {
    ids: Vec<u32>,
    vectors: Tensor,
}

impl VectorStore {
    /// `vectors` is `count × dim`.
    pub fn new(ids: Vec<u32>, vectors: Tensor) -> Result<Self> {
        let (rows, dim) = vectors
            .dims2()
            .ok_or_else(|| BridgeError::Input("vector store needs a matrix".into()))?;
        if dim == 0 {
            return Err(BridgeError::Input(
                "vector store dimension must be positive".into(),
            ));
        }
        if ids.len() != rows {
            return Err(BridgeError::Input(format!(
                "{} ids for {rows} vectors",
                ids.len()
            )));
        }
        Ok(VectorStore { ids, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.dim() as u32);
        w.u64(self.len() as u64);
        for (i, &id) in self.ids.iter().enumerate() {
            w.u32(id);
            w.f32s(self.vectors.row_slice(i));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(KIND, bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let dim_at = r.offset();
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(BridgeError::Format {
                kind: KIND,
                offset: dim_at,
                detail: "dimension must be positive".into(),
            });
        }
        let count = r.u64()?;
        let expected = (count as u128) * (4 + 4 * dim as u128) + HEADER_LEN as u128;
        if expected != bytes.len() as u128 {
            return Err(BridgeError::Format {
                kind: KIND,
                offset: (bytes.len() as u128).min(expected) as u64,
                detail: format!(
                    "header declares {count} records of dimension {dim} ({expected} bytes), file has {} bytes",
                    bytes.len()
                ),
            });
        }
        let count = count as usize;
        let mut ids = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count {
            ids.push(r.u32()?);
            data.extend(r.f32s(dim)?);
        }
        r.finish()?;
        VectorStore::new(ids, Tensor::new(vec![count, dim], data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VectorStore {
        let v = Tensor::new(
            vec![3, 2],
            vec![0.5, -1.0, 3.25, f32::MIN_POSITIVE, -0.0, 7.0],
        )
        .unwrap();
        VectorStore::new(vec![4, 9, 1], v).unwrap()
    }

    #[test]
    fn byte_layout() {
        let s = sample();
        let b = s.to_bytes();
        assert_eq!(b.len(), HEADER_LEN + 3 * (4 + 4 * 2));
        assert_eq!(&b[..4], b"LVEC");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[20..24].try_into().unwrap()), 4);
    }

    #[test]
    fn truncation_reports_offset() {
        let b = sample().to_bytes();
        let err = VectorStore::from_bytes(&b[..b.len() - 5]).unwrap_err();
        assert!(
            matches!(err, BridgeError::Format { offset, .. } if offset == (b.len() - 5) as u64)
        );
        let err = VectorStore::from_bytes(&b[..10]).unwrap_err();
        assert!(matches!(err, BridgeError::Format { offset: 8, .. }));
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(VectorStore::new(vec![], Tensor::zeros(&[0, 0])).is_err());
    }
}
