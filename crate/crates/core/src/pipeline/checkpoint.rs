use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorkit::{DType, ParamSet, Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"PASR1";
pub const VERSION: u32 = 1;

/// Named tensors plus the hash of the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config_hash: [u8; 32],
    pub params: ParamSet<T>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("checkpoint ends inside {what}")))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config_hash: [u8; 32], params: ParamSet<T>) -> Self {
        Self { config_hash, params }
    }

    /// Layout: magic, version, hash, tensor count, then per tensor its name,
    /// dtype code, rank, dims and little-endian payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.config_hash);
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE as u8);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(5, "magic")? != MAGIC {
            return Err(Error::Parse("not a PASR1 checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");
        let n = r.u32("tensor count")?;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?
                .to_string();
            let code = r.take(1, "dtype")?[0];
            if code != T::DTYPE as u8 {
                let want = if T::DTYPE == DType::F32 { "f32" } else { "f64" };
                return Err(Error::Parse(format!("tensor {name} has dtype code {code}, expected {want}")));
            }
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let width = std::mem::size_of::<T>();
            let payload =
                r.take(count.checked_mul(width).ok_or_else(|| Error::Parse("tensor too large".into()))?, "payload")?;
            let data = payload.chunks_exact(width).map(T::read_le).collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.at != bytes.len() {
            return Err(Error::Parse(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
        }
        Ok(Self { config_hash, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Warning text when the checkpoint came from a different configuration.
    pub fn hash_warning(&self, expected: &[u8; 32], path: &Path) -> Option<String> {
        (self.config_hash != *expected)
            .then(|| format!("{} was written under a different configuration (hash mismatch)", path.display()))
    }
}
