//! Checkpoint format: one JSON header line (config, version, named tensor
//! index with shapes and byte offsets) followed by raw little-endian f64
//! tensor data in index order. Loading validates every shape against the
//! header and the config; any mismatch is a hard error.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{PolicyParams, TensorSet};
use super::{PolicyConfig, PolicyError};

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: PolicyConfig,
    version: u64,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    params.t.for_each(|name, shape, data| {
        tensors.push(TensorEntry { name: name.to_string(), shape: shape.to_vec(), offset });
        offset += (data.len() * 8) as u64;
    });
    let header = Header { config: params.config.clone(), version: params.version, tensors };
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &header)
        .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
    w.write_all(b"\n")?;
    let mut io_err = None;
    params.t.for_each(|_, _, data| {
        if io_err.is_some() {
            return;
        }
        for v in data {
            if let Err(e) = w.write_all(&v.to_le_bytes()) {
                io_err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, PolicyError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(PolicyError::Checkpoint("missing header terminator".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| PolicyError::Checkpoint(format!("bad header: {e}")))?;
    header.config.validate()?;

    let mut t = TensorSet::zeros(&header.config);
    // Expected index in canonical order.
    let mut expected = Vec::new();
    let mut offset = 0u64;
    t.for_each(|name, shape, data| {
        expected.push((name.to_string(), shape.to_vec(), offset));
        offset += (data.len() * 8) as u64;
    });
    if header.tensors.len() != expected.len() {
        return Err(PolicyError::Checkpoint(format!(
            "tensor count {} does not match config ({} expected)",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (e, (name, shape, off)) in header.tensors.iter().zip(&expected) {
        if &e.name != name || &e.shape != shape || e.offset != *off {
            return Err(PolicyError::Checkpoint(format!(
                "tensor {:?} shape/offset mismatch (expected {:?} {:?} at {})",
                e.name, name, shape, off
            )));
        }
    }

    let mut io_err: Option<PolicyError> = None;
    t.for_each_mut(|name, data| {
        if io_err.is_some() {
            return;
        }
        let mut buf = vec![0u8; data.len() * 8];
        match r.read_exact(&mut buf) {
            Ok(()) => {
                for (i, v) in data.iter_mut().enumerate() {
                    *v = f64::from_le_bytes(buf[i * 8..i * 8 + 8].try_into().unwrap());
                }
            }
            Err(e) => {
                io_err = Some(PolicyError::Checkpoint(format!(
                    "truncated data for tensor {name}: {e}"
                )))
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    Ok(PolicyParams { config: header.config, version: header.version, t })
}
