//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "RALFCKPT"
//! version      u32       currently 1
//! flags        u32       bit 0: frozen
//! config_len   u64
//! config       config_len bytes of UTF-8 JSON
//! count        u32       number of tensors
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   dtype      u8        0 = f32, 1 = f64
//!   ndim       u32
//!   dims       ndim × u64
//!   data       product(dims) × dtype size bytes
//! ```
//!
//! The stamp of a checkpoint is the first 16 hex digits of the SHA-256 of
//! everything after the config block, so it identifies the weights
//! independent of metadata.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::param::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RALFCKPT";
pub const VERSION: u32 = 1;
const FLAG_FROZEN: u32 = 1;

/// A tensor as stored on disk, kept in its original precision.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes into `T`, converting precision if needed.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let n = self.dtype.size();
        let data: Vec<T> = match self.dtype {
            DType::F32 => self.bytes.chunks_exact(n).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => self.bytes.chunks_exact(n).map(|c| T::of(f64::read_le(c))).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub frozen: bool,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, config: serde_json::Value, frozen: bool) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| StoredTensor::from_tensor(&p.name, &p.value))
            .collect();
        Self {
            config,
            frozen,
            tensors,
        }
    }

    /// Loads every tensor into the matching parameter of `store`.
    pub fn restore_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let named = self
            .tensors
            .iter()
            .map(|t| Ok((t.name.clone(), t.to_tensor::<T>()?)))
            .collect::<Result<Vec<_>>>()?;
        store.load_values(&named)
    }

    fn tensor_section(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    /// Weight fingerprint, independent of the config block and flags.
    pub fn stamp(&self) -> String {
        let digest = Sha256::digest(self.tensor_section());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("JSON values serialize");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let flags = if self.frozen { FLAG_FROZEN } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&self.tensor_section());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("missing RALFCKPT magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let flags = r.u32()?;
        let config_len = r.u64()? as usize;
        let config = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| Error::Format(format!("config block: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype {code}")))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let bytes = r.take(n * dtype.size())?.to_vec();
            tensors.push(StoredTensor {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            frozen: flags & FLAG_FROZEN != 0,
            tensors,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
