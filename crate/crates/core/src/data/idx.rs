use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorkit::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an unsigned-byte IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxData {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

pub fn parse_idx(buf: &[u8]) -> Result<IdxData> {
    let word = |i: usize| -> Result<u32> {
        buf.get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Truncated(format!("IDX header ends after {} bytes", buf.len())))
    };
    let magic = word(0)?;
    let rank = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        m => return Err(Error::Parse(format!("bad IDX magic {m:#010x}"))),
    };
    let dims = (1..=rank).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 * (rank + 1);
    let len: usize = dims.iter().product();
    let bytes = buf
        .get(start..start + len)
        .ok_or_else(|| Error::Truncated(format!("IDX body needs {len} bytes, found {}", buf.len() - start)))?;
    Ok(IdxData { dims, bytes: bytes.to_vec() })
}

pub fn read_idx_raw(path: &Path) -> Result<IdxData> {
    parse_idx(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads an IDX file with bytes scaled to `[0, 1]`.
pub fn read_idx(path: &Path) -> Result<Tensor<f32>> {
    let raw = read_idx_raw(path)?;
    Tensor::new(raw.dims, raw.bytes.iter().map(|&b| b as f32 / 255.0).collect())
}
