//! "NNCK1" parameter checkpoints.
//!
//! Layout (little-endian): magic "NNCK1", u32 meta length + JSON metadata
//! bytes, u32 tensor count, then per tensor: u32 name length, name bytes,
//! u32 rank, u32 dims, f32 values. Values are stored as f32; training state
//! is f64 in memory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{expect_magic, read_f32, read_u32, write_f32, write_u32};
use crate::nn::params::Params;
use crate::nn::tensor::Tensor;

const MAGIC: &[u8] = b"NNCK1";

/// Write parameters plus a JSON metadata block.
pub fn save_params<P: AsRef<Path>>(path: P, params: &Params, meta: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let meta_bytes = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    write_u32(&mut w, meta_bytes.len() as u32)?;
    w.write_all(&meta_bytes)?;
    write_u32(&mut w, params.len() as u32)?;
    for p in params.iter() {
        write_u32(&mut w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        write_u32(&mut w, p.value.shape.len() as u32)?;
        for d in &p.value.shape {
            write_u32(&mut w, *d as u32)?;
        }
        for v in &p.value.data {
            write_f32(&mut w, *v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back into (params, metadata).
pub fn load_params<P: AsRef<Path>>(path: P) -> Result<(Params, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, MAGIC, "NNCK1")?;
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    std::io::Read::read_exact(&mut r, &mut meta_bytes)?;
    let meta: serde_json::Value =
        serde_json::from_slice(&meta_bytes).map_err(|e| Error::Format(format!("NNCK1 metadata: {e}")))?;
    let n_tensors = read_u32(&mut r)? as usize;
    let mut params = Params::new();
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        std::io::Read::read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Format(format!("NNCK1 tensor name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(read_f32(&mut r)? as f64);
        }
        params.add(name, Tensor::from_vec(&shape, data))?;
    }
    Ok((params, meta))
}

/// Check loaded parameters against a model definition: every expected
/// (name, shape) must be present with the right shape, and nothing extra.
pub fn validate_params(params: &Params, expected: &[(String, Vec<usize>)]) -> Result<()> {
    if params.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model defines {}",
            params.len(),
            expected.len()
        )));
    }
    for (name, shape) in expected {
        match params.get(name) {
            None => return Err(Error::Format(format!("checkpoint is missing tensor {name:?}"))),
            Some(t) if &t.shape != shape => {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {:?}, model expects {shape:?}",
                    t.shape
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}
