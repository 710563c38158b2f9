//! Model checkpoint container.
//!
//! Layout: magic `NNCKPT1`, u32 config-JSON length, the config as canonical
//! JSON, then every parameter in name order as
//! `u32 name length | name | u8 dtype | u32 rank | u32 extents... | values (LE)`,
//! and a trailing FNV-1a 64-bit checksum over everything before it.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use std::collections::BTreeMap;

use crate::graph::{parameter_shapes, ModelConfig, ModelParameters, ParamEntry};
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"NNCKPT1";

fn fnv1a64_bytes(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Serialize the full parameter set (trainable tensors and running
/// statistics) to `path`. Byte output is a pure function of the contents.
pub fn save_checkpoint<T: Element>(params: &ModelParameters<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let config_json = serde_json::to_string(params.config())
        .map_err(|e| Error::Internal(format!("config serialization: {e}")))?;
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_json.as_bytes());

    for (name, entry) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE_CODE);
        buf.extend_from_slice(&(entry.tensor.shape().len() as u32).to_le_bytes());
        for &e in entry.tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in entry.tensor.data() {
            v.write_le(&mut buf);
        }
    }
    let checksum = fnv1a64_bytes(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated while reading {what}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Load a checkpoint, verifying magic, checksum, dtype, and that the stored
/// tensors are exactly the set the embedded config implies.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<ModelParameters<T>> {
    let buf = fs::read(path)?;
    if buf.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(Error::Format("checkpoint shorter than header".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored_sum = u64::from_le_bytes(tail.try_into().unwrap());
    let actual_sum = fnv1a64_bytes(body);
    if stored_sum != actual_sum {
        return Err(Error::Format(format!(
            "checkpoint checksum mismatch: stored {stored_sum:#x}, computed {actual_sum:#x}"
        )));
    }

    let mut r = Reader { buf: body, pos: 0 };
    let magic = r.take(CHECKPOINT_MAGIC.len(), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let config_len = r.u32("config length")? as usize;
    let config_json = r.take(config_len, "config JSON")?;
    let config: ModelConfig = serde_json::from_slice(config_json)
        .map_err(|e| Error::Format(format!("checkpoint config field: {e}")))?;
    let specs = parameter_shapes(&config)?;

    let mut entries: BTreeMap<String, ParamEntry<T>> = BTreeMap::new();
    while r.pos < body.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != T::DTYPE_CODE {
            return Err(Error::Format(format!(
                "parameter '{name}': dtype code {dtype} does not match requested element type ({})",
                T::DTYPE_CODE
            )));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let spec = specs.get(&name).ok_or_else(|| {
            Error::Format(format!("parameter '{name}' is not part of the stored config"))
        })?;
        if spec.shape != shape {
            return Err(Error::Format(format!(
                "parameter '{name}': stored shape {shape:?} but config implies {:?}",
                spec.shape
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * T::BYTES, "values")?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let tensor = Tensor::new(shape, data)?;
        entries.insert(
            name,
            ParamEntry {
                tensor,
                trainable: spec.trainable,
            },
        );
    }
    if entries.len() != specs.len() {
        return Err(Error::Format(format!(
            "checkpoint stores {} tensors but the config implies {}",
            entries.len(),
            specs.len()
        )));
    }
    Ok(ModelParameters::from_entries(config, entries))
}
