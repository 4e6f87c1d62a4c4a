//! Flat binary container for named weight tensors.
//!
//! Layout, all integers little-endian:
//!   magic "CLAN" | version u32 | tensor count u32 |
//!   per tensor: name length u32, UTF-8 name, rank u32, extents u32 each,
//!   values as raw little-endian 64-bit reals.
//!
//! Values round-trip bit-exactly; f32 models widen to f64 on save and
//! narrow back losslessly on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{ClanError, Result};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"CLAN";
const VERSION: u32 = 1;

pub fn save<E: Element>(path: &Path, entries: &[(String, Tensor<E>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &ext in &shape {
            w.write_all(&(ext as u32).to_le_bytes())?;
        }
        for &v in tensor.data().iter() {
            w.write_all(&v.as_f64().to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One stored tensor: name, extents, f64 values.
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn load(path: &Path) -> Result<Vec<Entry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ClanError::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ClanError::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| ClanError::Checkpoint(format!("invalid tensor name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            values.push(f64::from_bits(u64::from_le_bytes(buf)));
        }
        entries.push(Entry { name, shape, values });
    }
    Ok(entries)
}

/// Copy loaded values into an existing set of named tensors. Every target
/// must be present with a matching shape.
pub fn restore<E: Element>(entries: &[Entry], targets: &[(String, Tensor<E>)]) -> Result<()> {
    for (name, tensor) in targets {
        let entry = entries
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| ClanError::Checkpoint(format!("missing tensor {name}")))?;
        if entry.shape != tensor.shape() {
            return Err(ClanError::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?} does not match model shape {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        let data: Vec<E> = entry.values.iter().map(|&v| E::from_f64(v)).collect();
        tensor.set_data(&data);
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
