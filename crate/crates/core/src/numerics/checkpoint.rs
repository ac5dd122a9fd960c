//! Binary tensor container used for model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "HRFCKPT\x01"
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON (CheckpointHeader)
//! count        u64       number of tensors
//! per tensor, in ascending path order:
//!   path_len   u32
//!   path       path_len bytes UTF-8
//!   ndim       u32
//!   dims       ndim x u64
//!   data       product(dims) x width bytes, IEEE-754 little-endian
//! ```
//!
//! `width` is 4 for `dtype = "f32"` and 8 for `dtype = "f64"`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Precision, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HRFCKPT\x01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: Precision,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub global_step: u64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl CheckpointHeader {
    pub fn new<T: Real>(config_hash: impl Into<String>) -> Self {
        CheckpointHeader {
            format_version: 1,
            dtype: T::PRECISION,
            config_hash: config_hash.into(),
            seeds: BTreeMap::new(),
            global_step: 0,
            meta: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile<T: Real> {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> TensorFile<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.dtype = T::PRECISION;
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (path, t) in &self.tensors {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&T::encode_le(t.data()));
        }
        Ok(out)
    }

    /// Parses a container; tensors stored at another precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let hlen = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let plen = r.u32()? as usize;
            let path = String::from_utf8(r.take(plen)?.to_vec())
                .map_err(|e| Error::Data(format!("checkpoint path: {e}")))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * header.dtype.width())?;
            let t = match header.dtype {
                d if d == T::PRECISION => Tensor::new(shape, T::decode_le(raw))?,
                Precision::F32 => Tensor::<f32>::new(shape, f32::decode_le(raw))?.cast(),
                Precision::F64 => Tensor::<f64>::new(shape, f64::decode_le(raw))?.cast(),
            };
            tensors.insert(path, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        Ok(TensorFile { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
