//! Named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"ICKP"  u32 version  u32 tensor_count
//! per tensor:
//!   u32 name_len  name (UTF-8)  u32 ndim  u64 dims[ndim]  f32 data[prod(dims)]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ICKP";
const VERSION: u32 = 1;

pub fn write_archive<W: Write>(mut w: W, store: &ParamStore<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor::new(shape, data)));
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_archive(std::io::BufWriter::new(f), store)
}

/// Loads an archive into an already-built store; names and shapes must match.
pub fn load_into(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    let f = std::fs::File::open(path)?;
    let tensors = read_archive(std::io::BufReader::new(f))?;
    assign(store, tensors)
}

pub fn assign(store: &mut ParamStore<f32>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "archive has {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    let names = store.names().to_vec();
    for ((name, t), (expected, slot)) in tensors.into_iter().zip(names.iter().zip(store.tensors_mut())) {
        if &name != expected || t.shape != slot.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {:?} does not match {expected} {:?}",
                t.shape, slot.shape
            )));
        }
        *slot = t;
    }
    Ok(())
}
