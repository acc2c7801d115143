//! Versioned checkpoint container: a JSON header followed by named tensors.
//!
//! Layout: magic, `u32` version, `u64` header length, header JSON, then every
//! tensor listed in the header as little-endian `f64` values. Tensors are
//! widened to `f64` on write, which is exact for `f32` parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::io_err;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"WMRLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Writes `meta` and `tensors` to `path` via a temporary file and rename.
pub fn save(path: &Path, meta: &Value, tensors: &[(String, Tensor)]) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.dims().to_vec() }).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(&tmp));
        write(MAGIC)?;
        write(&VERSION.to_le_bytes())?;
        write(&(header.len() as u64).to_le_bytes())?;
        write(&header)?;
        for (_, t) in tensors {
            let values: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            let mut bytes = Vec::with_capacity(values.len() * 8);
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            write(&bytes)?;
        }
        w.into_inner().map_err(|e| io_err(&tmp)(e.into_error()))?.sync_all().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Contents of a checkpoint file.
pub struct Loaded {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Loaded {
    /// Removes and returns a tensor, converted to `dtype`.
    pub fn take(&mut self, name: &str, dtype: DType) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        Ok(self.tensors.swap_remove(pos).1.to_dtype(dtype)?)
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(io_err(path));
    let mut magic = [0u8; 8];
    read(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let mut word = [0u8; 4];
    read(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    read(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    read(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        read(&mut bytes)?;
        let values: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        tensors.push((entry.name, Tensor::from_vec(values, entry.shape, &Device::Cpu)?));
    }
    Ok(Loaded { meta: header.meta, tensors })
}
