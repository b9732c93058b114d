//! Binary model format.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "RTNM" | version | param count |
//!   { name length | name bytes (UTF-8) | rank | extents... | values as f32 LE }*
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, RtnError};

use super::grid::Grid;
use super::params::{GroupName, ParamStore};

pub const MAGIC: &[u8; 4] = b"RTNM";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_params<W: Write>(store: &ParamStore, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, grid) in store.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(grid.rank() as u32).to_le_bytes())?;
        for &e in grid.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in grid.values() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_params(store, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Serialized form of one parameter group on its own.
pub fn group_bytes(store: &ParamStore, group: GroupName) -> Vec<u8> {
    let mut sub = ParamStore::new();
    for (name, grid) in &store.group(group).params {
        sub.insert(name.clone(), grid.clone()).expect("names are unique within a store");
    }
    to_bytes(&sub)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(RtnError::ModelFormat(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(RtnError::ModelFormat("bad magic, not an RTNM file".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(RtnError::ModelFormat(format!("unsupported format version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| RtnError::ModelFormat(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(4 * n)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        store
            .insert(name, Grid::new(shape, values)?)
            .map_err(|e| RtnError::ModelFormat(e.to_string()))?;
    }
    if cur.pos != bytes.len() {
        return Err(RtnError::ModelFormat(format!(
            "{} trailing bytes after last parameter",
            bytes.len() - cur.pos
        )));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| RtnError::io(path, e))?;
    file.write_all(&to_bytes(store)).map_err(|e| RtnError::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| RtnError::io(path, e))?;
    from_bytes(&bytes)
}
