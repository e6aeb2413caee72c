//! Binary checkpoint format.
//!
//! Layout: magic "DUO1" | format version (u32 LE) | tensor count (u32 LE) |
//! per tensor: name length (u32 LE), UTF-8 name, rank (u32 LE), extents
//! (u64 LE each), row-major f32 LE payload | CRC-32 of all preceding bytes.
//! A load refuses anything whose CRC or version does not match.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DUO1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode(tensors: &[CheckpointTensor]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".to_string()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<CheckpointTensor>> {
    if buf.len() < MAGIC.len() + 12 {
        return Err(Error::Checkpoint("truncated file".to_string()));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch".to_string()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".to_string()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} not supported (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".to_string()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(CheckpointTensor { name, shape, values });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".to_string()));
    }
    Ok(tensors)
}

/// Serialize every parameter (single precision, frozen tables included).
pub fn from_params<F: Real>(params: &ParamSet<F>) -> Vec<CheckpointTensor> {
    params
        .iter()
        .map(|p| CheckpointTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            values: p.value.to_f32(),
        })
        .collect()
}

/// Overwrite a model's parameters from checkpoint tensors; every name and
/// shape must match.
pub fn load_into<F: Real>(tensors: &[CheckpointTensor], params: &mut ParamSet<F>) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors for a model with {} parameters",
            tensors.len(),
            params.len()
        )));
    }
    for t in tensors {
        let id = params
            .by_name(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{}'", t.name)))?;
        let param = params.get_mut(id);
        if param.value.shape() != t.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has shape {:?}, model expects {:?}",
                t.name,
                t.shape,
                param.value.shape()
            )));
        }
        param.value = Tensor::from_f32(t.shape.clone(), &t.values)?;
    }
    Ok(())
}

pub fn save_file(path: &Path, tensors: &[CheckpointTensor]) -> Result<()> {
    Ok(fs::write(path, encode(tensors))?)
}

pub fn load_file(path: &Path) -> Result<Vec<CheckpointTensor>> {
    decode(&fs::read(path)?)
}
