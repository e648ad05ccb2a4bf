//! Checkpoint container: magic `OBJF`, a version word, a JSON metadata block
//! carrying the model configuration, then a table of named tensors with
//! dtype, shape and byte offset into a little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelConfig, ModelWeights, ObjFormer, Task};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"OBJF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub task: Task,
    /// Free-form state owned by the writer (trainer progress, rng, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// One named tensor read back from a checkpoint.
#[derive(Debug, Clone)]
pub struct RawEntry<E> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<E>,
}

pub fn save_checkpoint<'a, E: Element>(
    path: &Path,
    meta: &CheckpointMeta,
    entries: impl Iterator<Item = (&'a str, &'a [usize], &'a [E])>,
) -> Result<()> {
    let meta_json =
        serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?;
    let mut table = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut n: u32 = 0;
    for (name, shape, data) in entries {
        let offset = payload.len() as u64;
        for &v in data {
            v.write_le(&mut payload);
        }
        table.extend_from_slice(&(name.len() as u16).to_le_bytes());
        table.extend_from_slice(name.as_bytes());
        table.push(E::DTYPE.tag());
        table.push(shape.len() as u8);
        for &d in shape {
            table.extend_from_slice(&(d as u32).to_le_bytes());
        }
        table.extend_from_slice(&offset.to_le_bytes());
        table.extend_from_slice(&(data.len() as u64).to_le_bytes());
        n += 1;
    }
    let mut out = Vec::with_capacity(16 + meta_json.len() + table.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&table);
    out.extend_from_slice(&payload);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("checkpoint truncated, wanted {n} more bytes"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint<E: Element>(path: &Path) -> Result<(CheckpointMeta, Vec<RawEntry<E>>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad magic, not an OBJF checkpoint".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta_bytes = r.take(meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("meta decode: {e}")))?;
    let n = r.u32()?;
    let mut headers = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Parse { offset: r.pos, message: "entry name not utf-8".into() })?;
        let dtype = DType::from_tag(r.u8()?)?;
        if dtype != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "entry '{name}' stored as {dtype:?}, requested {:?}",
                E::DTYPE
            )));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let offset = r.u64()? as usize;
        let count = r.u64()? as usize;
        if shape.iter().product::<usize>() != count {
            return Err(Error::Checkpoint(format!("entry '{name}' shape/count mismatch")));
        }
        headers.push((name, shape, offset, count));
    }
    let payload_start = r.pos;
    let width = E::DTYPE.byte_width();
    let mut entries = Vec::with_capacity(headers.len());
    for (name, shape, offset, count) in headers {
        let start = payload_start + offset;
        let end = start + count * width;
        if end > buf.len() {
            return Err(Error::Parse {
                offset: start.min(buf.len()),
                message: format!("payload of '{name}' out of bounds"),
            });
        }
        let data = buf[start..end].chunks_exact(width).map(E::read_le).collect();
        entries.push(RawEntry { name, shape, data });
    }
    Ok((meta, entries))
}

impl<E: Element> ObjFormer<E> {
    /// Write the weights plus metadata; `extra` travels alongside the model
    /// configuration for callers that checkpoint more than the network.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta =
            CheckpointMeta { config: self.config().clone(), task: self.task(), extra };
        save_checkpoint(
            path,
            &meta,
            self.weights().iter().map(|(n, t)| (n, t.shape(), t.data())),
        )
    }

    /// Rebuild a model from a checkpoint; ignores non-model entries (for
    /// example optimizer state) and errors if any model parameter is missing
    /// or mis-shaped.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (meta, entries) = load_checkpoint::<E>(path)?;
        let mut model = ObjFormer::new(meta.config.clone(), meta.task, 0)?;
        model.restore_entries(&entries)?;
        Ok((model, meta.extra))
    }

    pub(crate) fn restore_entries(&mut self, entries: &[RawEntry<E>]) -> Result<()> {
        let mut seen = 0usize;
        for e in entries {
            if let Some(idx) = self.weights.index_of(&e.name) {
                let t = self.weights.tensor_mut(idx);
                if t.shape() != e.shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "parameter '{}' has shape {:?} in file, {:?} in model",
                        e.name,
                        e.shape,
                        t.shape()
                    )));
                }
                t.data_mut().copy_from_slice(&e.data);
                seen += 1;
            }
        }
        if seen != self.weights.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint restored {seen} of {} model parameters",
                self.weights.len()
            )));
        }
        Ok(())
    }
}

impl<E: Element> ModelWeights<E> {
    /// Replace every stored tensor from raw entries by name.
    pub fn tensor_from_entry(entry: &RawEntry<E>) -> Result<Tensor<E>> {
        Tensor::from_vec(entry.data.clone(), &entry.shape)
    }
}
