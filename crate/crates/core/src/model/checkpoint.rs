//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u64` unless noted):
//!
//! ```text
//! magic      8 bytes  "STIMCKPT"
//! version    u32
//! config     len + UTF-8 JSON of ModelConfig
//! seed, step
//! n_params   then per tensor: name (len + UTF-8), ndim, dims…, f64 data
//! n_aux      auxiliary tensors in the same encoding (normalization stats)
//! ```
//!
//! Tensors are written in name order, so identical state gives identical
//! bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"STIMCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub seed: u64,
    pub step: u64,
    /// Extra named tensors, e.g. per-sensor `norm.mean` / `norm.std`.
    pub aux: BTreeMap<String, Tensor>,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(buf, name);
    put_u64(buf, t.ndim() as u64);
    for &d in t.shape() {
        put_u64(buf, d as u64);
    }
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Config("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Config("length overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Config("invalid UTF-8 in checkpoint".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let ndim = self.len()?;
        let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Config("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut buf, &serde_json::to_string(&self.config)?);
        put_u64(&mut buf, self.seed);
        put_u64(&mut buf, self.step);
        put_u64(&mut buf, self.params.iter().count() as u64);
        for (name, t) in self.params.iter() {
            put_tensor(&mut buf, name, t);
        }
        put_u64(&mut buf, self.aux.len() as u64);
        for (name, t) in &self.aux {
            put_tensor(&mut buf, name, t);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Config("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let config: ModelConfig = serde_json::from_str(&r.string()?)?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let n = r.len()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let (name, t) = r.tensor()?;
            entries.insert(name, t);
        }
        let params = ModelParams::from_entries(&config, entries)?;
        let n_aux = r.len()?;
        let mut aux = BTreeMap::new();
        for _ in 0..n_aux {
            let (name, t) = r.tensor()?;
            aux.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Config("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config,
            params,
            seed,
            step,
            aux,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
