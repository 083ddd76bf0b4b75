//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic "PFCKPT01"
//!   meta count u32, then per entry: key (u32 len + utf8), value (u32 len + utf8)
//!   param count u32, then per record: name (u32 len + utf8), ndim u32,
//!     dims u64 each, f64 data
//!   buffer count u32, same record layout
//!
//! Values are written verbatim from the f64 bit patterns, so a save/load
//! round-trip is byte-exact.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::nn::ParamRegistry;

const MAGIC: &[u8; 8] = b"PFCKPT01";

/// Key/value header describing the model a checkpoint belongs to
/// (grid extents, channel widths, config hash). Sorted for determinism.
pub type CheckpointMeta = BTreeMap<String, String>;

#[derive(Debug)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<TensorRecord>,
    pub buffers: Vec<TensorRecord>,
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, registry: &ParamRegistry) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;

    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    for (k, v) in meta {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }

    w.write_all(&(registry.params().len() as u32).to_le_bytes())?;
    for p in registry.params() {
        write_record(&mut w, &p.name(), &p.shape(), &p.to_vec())?;
    }
    w.write_all(&(registry.buffers().len() as u32).to_le_bytes())?;
    for b in registry.buffers() {
        write_record(&mut w, &b.name(), &b.shape(), &b.to_vec())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut meta = CheckpointMeta::new();
    for _ in 0..read_u32(&mut r)? {
        let k = read_str(&mut r)?;
        let v = read_str(&mut r)?;
        meta.insert(k, v);
    }
    let mut params = Vec::new();
    for _ in 0..read_u32(&mut r)? {
        params.push(read_record(&mut r)?);
    }
    let mut buffers = Vec::new();
    for _ in 0..read_u32(&mut r)? {
        buffers.push(read_record(&mut r)?);
    }
    Ok(Checkpoint {
        meta,
        params,
        buffers,
    })
}

impl Checkpoint {
    /// Loads values into a matching registry. Every registry entry must be
    /// present with the right shape; extra checkpoint records are an error.
    pub fn apply(&self, registry: &ParamRegistry) -> Result<()> {
        let by_name: BTreeMap<&str, &TensorRecord> =
            self.params.iter().map(|r| (r.name.as_str(), r)).collect();
        if by_name.len() != registry.params().len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, model expects {}",
                by_name.len(),
                registry.params().len()
            )));
        }
        for p in registry.params() {
            let name = p.name();
            let rec = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::config(format!("checkpoint missing parameter {name}")))?;
            if rec.shape != p.shape() {
                return Err(Error::config(format!(
                    "checkpoint shape {:?} does not match parameter {name} {:?}",
                    rec.shape,
                    p.shape()
                )));
            }
            p.set_data(rec.data.clone())?;
        }
        let bufs: BTreeMap<&str, &TensorRecord> =
            self.buffers.iter().map(|r| (r.name.as_str(), r)).collect();
        for b in registry.buffers() {
            let name = b.name();
            let rec = bufs
                .get(name.as_str())
                .ok_or_else(|| Error::config(format!("checkpoint missing buffer {name}")))?;
            b.set_data(rec.data.clone())?;
        }
        Ok(())
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_record(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    write_str(w, name)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Parse(format!("invalid utf8 in checkpoint: {e}")))
}

fn read_record(r: &mut impl Read) -> Result<TensorRecord> {
    let name = read_str(r)?;
    let ndim = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(TensorRecord { name, shape, data })
}
