//! RQCK checkpoint files.
//!
//! ```text
//! "RQCK" | version u32 | config_len u32 | config (key = value text)
//! tensor_count u32
//! per tensor: name_len u16 | name | dtype u8 | rank u8 | dims u64 × rank | values
//! ```
//!
//! Integers and values are little-endian. Dtype 0 is `f32`; dtype 1 (`f64`)
//! is used for verification models.

use std::path::Path;

use super::{layout, ModelConfig, TransformerParams};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RQCK";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(cfg: &ModelConfig, params: &TransformerParams<Tensor<T>>) -> Result<Vec<u8>> {
    let config = cfg.to_kv().to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(config.len()).map_err(too_big)?.to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let names = params.names();
    let values = params.values();
    out.extend_from_slice(&u32::try_from(names.len()).map_err(too_big)?.to_le_bytes());
    for (name, t) in names.iter().zip(values) {
        out.extend_from_slice(&u16::try_from(name.len()).map_err(too_big)?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE_CODE);
        out.push(u8::try_from(t.rank()).map_err(too_big)?);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn too_big<E>(_: E) -> Error {
    Error::Format("field too large for checkpoint encoding".into())
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
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }
}

/// Decodes a checkpoint whose tensors are stored as `T`. Names, order and
/// shapes must match the layout implied by the stored config.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(ModelConfig, TransformerParams<Tensor<T>>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an RQCK file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported RQCK version {version}")));
    }
    let config_len = r.u32()? as usize;
    let cfg = ModelConfig::from_kv(&KvMap::parse(r.utf8(config_len)?)?)?;
    let expected = layout(&cfg);
    let count = r.u32()? as usize;
    let names = expected.names();
    if count != names.len() {
        return Err(Error::Format(format!(
            "config implies {} tensors, file has {count}",
            names.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, spec) in names.iter().zip(expected.values()) {
        let n = r.u16()? as usize;
        let name = r.utf8(n)?;
        if name != want_name {
            return Err(Error::Format(format!("expected tensor '{want_name}', found '{name}'")));
        }
        let dtype = r.u8()?;
        if dtype != T::DTYPE_CODE {
            return Err(Error::Format(format!(
                "tensor '{name}' has dtype {dtype}, expected {}",
                T::DTYPE_CODE
            )));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != spec.shape {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {shape:?}, expected {:?}",
                spec.shape
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((cfg, expected.with_values(tensors)?))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ModelConfig, TransformerParams<Tensor<T>>)> {
    decode(&std::fs::read(path)?)
}
