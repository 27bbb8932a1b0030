// SPDX-License-Identifier: MIT OR Apache-2.0

//! Little-endian binary helpers shared by checkpoints and vector stores.
//!
//! Parameter record layout: name length u32, name bytes (UTF-8), rank u32,
//! dims u32 × rank, then the f32 values.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{BridgeError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn f32s(&mut self, xs: &[f32]) {
        self.buf.reserve(xs.len() * 4);
        for x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn records(&mut self, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.u32(name.len() as u32);
            self.bytes(name.as_bytes());
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u32(d as u32);
            }
            self.f32s(t.data());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    kind: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(kind: &'static str, buf: &'a [u8]) -> Self {
        Reader { kind, buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn error(&self, detail: impl Into<String>) -> BridgeError {
        BridgeError::Format {
            kind: self.kind,
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.error(format!(
                "truncated: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            ))),
        }
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4)?;
        if got != expected {
            return Err(BridgeError::Format {
                kind: self.kind,
                offset: at as u64,
                detail: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(BridgeError::Version {
                kind: self.kind,
                found,
                expected,
            });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.error("value count overflows"))?;
        let b = self.take(bytes)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn records(&mut self, count: usize) -> Result<ParamSet> {
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = self.u32()? as usize;
            let at = self.pos;
            let name = std::str::from_utf8(self.take(name_len)?)
                .map_err(|_| BridgeError::Format {
                    kind: self.kind,
                    offset: at as u64,
                    detail: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let rank = self.u32()? as usize;
            if rank > 8 {
                return Err(self.error(format!("implausible rank {rank} for `{name}`")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(self.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| self.error("dimension product overflows"))?;
            let data = self.f32s(n)?;
            params.insert(name, Tensor::new(dims, data)?);
        }
        Ok(params)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.error(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes through a sibling temporary file and renames, so a failed write
/// never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = partial_path(path);
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(BridgeError::io(path, e));
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| BridgeError::io(path, e))
}
