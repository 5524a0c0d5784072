//! Flat binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"SLTG"
//! version u8 = 1
//! count  u32                    number of records
//! record*count:
//!   name_len u32, name utf-8 bytes
//!   rows u32, cols u32
//!   rows*cols f64 values, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::matrix::Matrix;
use super::params::ParamStore;

const MAGIC: &[u8; 4] = b"SLTG";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("checkpoint record {0} has invalid utf-8 name")]
    BadName(usize),
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint has unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name}: checkpoint shape {got_rows}x{got_cols} does not match {want_rows}x{want_cols}")]
    ShapeMismatch { name: String, got_rows: usize, got_cols: usize, want_rows: usize, want_cols: usize },
    #[error("checkpoint value is not finite in parameter {0}")]
    NonFinite(String),
}

/// Writes every parameter of `store` in insertion order.
pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, m) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for &v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint into an existing store. The checkpoint must carry
/// exactly the store's parameter names with matching shapes, which catches
/// configuration drift between the saved and requested model.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<(), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(CheckpointError::BadVersion(version[0]));
    }
    let count = read_u32(&mut r)? as usize;
    let mut seen = Vec::with_capacity(count);
    for rec in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName(rec))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(name));
        }
        if !store.contains(&name) {
            return Err(CheckpointError::UnknownParam(name));
        }
        let want = store.get(&name);
        if (want.rows(), want.cols()) != (rows, cols) {
            return Err(CheckpointError::ShapeMismatch {
                name,
                got_rows: rows,
                got_cols: cols,
                want_rows: want.rows(),
                want_cols: want.cols(),
            });
        }
        store.set(&name, Matrix::from_vec(rows, cols, data).expect("length checked"));
        seen.push(name);
    }
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        if !seen.contains(&name) {
            return Err(CheckpointError::MissingParam(name));
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, std::io::Error> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
