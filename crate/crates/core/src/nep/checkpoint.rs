//! Binary checkpoint format for predictor parameters.
//!
//! Layout: an 8-byte magic, a format version, the JSON-encoded model config,
//! then every tensor tagged with its name and shape. All integers are
//! little-endian and values are raw f64 bits, so a save/load round trip is
//! bit-exact and a reload re-runs the full shape validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::model::{NepConfig, NepParams};

const MAGIC: &[u8; 8] = b"NEPCKPT1";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &NepParams, path: &Path) -> Result<()> {
    let config = serde_json::to_vec(&params.config)
        .map_err(|e| Error::Checkpoint(format!("cannot encode config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(config.len()).unwrap().to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&u32::try_from(params.tensors().len()).unwrap().to_le_bytes());
    for (name, tensor) in params.tensors() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name '{name}' too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32::try_from(tensor.rows()).unwrap().to_le_bytes());
        out.extend_from_slice(&u32::try_from(tensor.cols()).unwrap().to_le_bytes());
        for value in tensor.data() {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NepParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = Reader { bytes: &bytes, pos: 0 };
    if reader.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = reader.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let config_len = reader.u32()? as usize;
    let config: NepConfig = serde_json::from_slice(reader.take(config_len)?)
        .map_err(|e| Error::Checkpoint(format!("cannot decode config: {e}")))?;
    let count = reader.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = reader.u16()? as usize;
        let name = std::str::from_utf8(reader.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not valid utf-8".into()))?
            .to_owned();
        let rows = reader.u32()? as usize;
        let cols = reader.u32()? as usize;
        let len = rows.checked_mul(cols).ok_or_else(|| {
            Error::Checkpoint(format!("tensor '{name}' shape {rows}x{cols} overflows"))
        })?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(reader.f64()?);
        }
        tensors.insert(name, Matrix::from_fn(rows, cols, |r, c| data[r * cols + c]));
    }
    if reader.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - reader.pos
        )));
    }
    NepParams::from_tensors(config, tensors)
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
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
