//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "XREGPRM\0"
//! version  u8       1
//! count    u32      number of records
//! record   repeated `count` times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (u32 each)
//!   values   f64 * product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{numel, ParamStore, Real};
use crate::error::{malformed, shape_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"XREGPRM\0";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for d in &r.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    let mut cur = bytes;
    let bad = |why: &str| malformed(path, why.to_string());
    let take = |n: usize, cur: &mut &[u8]| -> Result<Vec<u8>> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (h, t) = cur.split_at(n);
        *cur = t;
        Ok(h.to_vec())
    };
    let u32_at = |b: Vec<u8>| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    if take(8, &mut cur)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = take(1, &mut cur)?[0];
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32_at(take(4, &mut cur)?);
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = u32_at(take(4, &mut cur)?);
        let name = String::from_utf8(take(name_len, &mut cur)?).map_err(|_| bad("name is not UTF-8"))?;
        let ndim = u32_at(take(4, &mut cur)?);
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32_at(take(4, &mut cur)?));
        }
        let n = numel(&shape);
        let raw = take(n.checked_mul(8).ok_or_else(|| bad("size overflow"))?, &mut cur)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record { name, shape, values });
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(records)
}

pub fn records_of(store: &ParamStore) -> Vec<Record> {
    store
        .iter()
        .map(|(_, p)| Record {
            name: p.name.clone(),
            shape: p.shape.clone(),
            values: p.value.iter().map(|&v| v as f64).collect(),
        })
        .collect()
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(&records_of(store)))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes, path)
}

/// Overwrites every parameter of `store` from the file. Every stored
/// parameter must be present with a matching shape.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let records = read(path)?;
    apply(store, &records)
}

pub fn apply(store: &mut ParamStore, records: &[Record]) -> Result<()> {
    for r in records {
        let id = store
            .find(&r.name)
            .ok_or_else(|| Error::UnknownParameter(r.name.clone()))?;
        let p = store.get_mut(id);
        if p.shape != r.shape {
            return Err(shape_err("checkpoint", &p.shape, &r.shape));
        }
        p.value = r.values.iter().map(|&v| v as Real).collect();
    }
    if records.len() != store.len() {
        let missing = store
            .iter()
            .find(|(_, p)| !records.iter().any(|r| r.name == p.name))
            .map(|(_, p)| p.name.clone())
            .unwrap_or_default();
        return Err(Error::UnknownParameter(format!("{missing} (missing from checkpoint)")));
    }
    Ok(())
}
