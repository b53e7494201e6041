//! Flat binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  b"MMFC"
//! version u16      1
//! count   u32      number of parameter records
//! per record:
//!   name_len u16, name bytes (UTF-8),
//!   rank     u8,  dims u32 * rank,
//!   payload  f32 * prod(dims), row-major
//! ```
//!
//! Round-trips are bit-exact: payloads are stored as f32 regardless of the
//! training float width, and `save -> load -> save` reproduces the file.

use crate::binio::Reader;
use crate::error::{CoreError, Result};
use crate::params::ParamSet;
use crate::tensor::Real;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MMFC";
const VERSION: u16 = 1;

pub fn write_checkpoint<T: Real, W: Write>(params: &ParamSet<T>, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(CoreError::contract(format!(
                "parameter name too long: {}",
                p.name
            )));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.shape.len() as u8])?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &p.value {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Real, R: Read>(r: R) -> Result<ParamSet<T>> {
    let mut r = Reader::new(r);
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(CoreError::format(0, "bad magic, not a checkpoint file"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CoreError::format(4, format!("unsupported version {}", version)));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.utf8(name_len)?;
        let rank = r.u8()? as usize;
        if rank == 0 || rank > 2 {
            return Err(CoreError::format(
                r.offset - 1,
                format!("unsupported rank {} for `{}`", rank, name),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut value = Vec::with_capacity(n);
        for _ in 0..n {
            value.push(T::from_f32(r.f32()?));
        }
        params.push(name, shape, value)?;
    }
    Ok(params)
}

/// Atomic save: write to a sibling temp file, then rename into place.
pub fn save_checkpoint<T: Real>(params: &ParamSet<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        write_checkpoint(params, &mut f)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ParamSet<T>> {
    let f = fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
