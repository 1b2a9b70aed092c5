//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "RUMENCK1"
//! meta_len   u64       length of the metadata blob
//! meta       bytes     UTF-8 JSON (run configuration, vocabularies)
//! count      u32       number of parameters
//! repeated `count` times:
//!   name_len u32, name (UTF-8)
//!   kind     u8        0 = weight, 1 = bias, 2 = frozen
//!   ndim     u32, dims (u64 each)
//!   data     f64 × product(dims), IEEE-754 little-endian
//! ```
//!
//! Values are written bit-for-bit, so save → load reproduces every parameter
//! exactly. Saving writes a sibling temporary file and renames it into place.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{ParamKind, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RUMENCK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn write_to<W: Write>(mut w: W, meta: &str, store: &ParamStore) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.kind.code()])?;
        let shape = p.value().shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value().data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String, CheckpointError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

pub fn read_from<R: Read>(mut r: R) -> Result<(String, ParamStore), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let meta_len = read_u64(&mut r)? as usize;
    let meta = read_string(&mut r, meta_len)?;
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let kind =
            ParamKind::from_code(kind[0]).ok_or_else(|| CheckpointError::Corrupt(format!("bad kind for {name}")))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if store.id(&name).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate parameter {name}")));
        }
        store.insert(name, kind, t);
    }
    Ok((meta, store))
}

/// Write via `<path>.tmp` and rename, so a crash never leaves a partial file
/// under `path`.
pub fn save(path: &Path, meta: &str, store: &ParamStore) -> Result<(), CheckpointError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let f = fs::File::create(&tmp)?;
        let mut w = BufWriter::new(f);
        write_to(&mut w, meta, store)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, ParamStore), CheckpointError> {
    let f = fs::File::open(path)?;
    read_from(BufReader::new(f))
}
