//! Binary checkpoint container shared by the router and the fusion model.
//!
//! Layout (little-endian): 4-byte magic, u32 version, u32-length-prefixed JSON
//! config echo, u32 parameter count, then per parameter: u32-length-prefixed
//! name, u32 rank, u64 dims, fp64 values.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::data::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn write(path: &Path, magic: &[u8; 4], config_json: &str, store: &ParamStore) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let io = |e| Error::io(path, e);
    let mut w = Writer::new(BufWriter::new(file));
    w.bytes(magic).map_err(io)?;
    w.u32(CHECKPOINT_VERSION).map_err(io)?;
    w.str(config_json).map_err(io)?;
    w.u32(store.len() as u32).map_err(io)?;
    for (name, t) in store.iter() {
        w.str(name).map_err(io)?;
        w.u32(t.ndim() as u32).map_err(io)?;
        for &d in t.shape() {
            w.u64(d as u64).map_err(io)?;
        }
        w.f64s(t.data()).map_err(io)?;
    }
    w.finish().map_err(io)?;
    Ok(())
}

pub(crate) fn read(path: &Path, magic: &[u8; 4]) -> Result<(String, ParamStore)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(BufReader::new(file));
    let found = r.bytes::<4>()?;
    if &found != magic {
        return Err(Error::Format(format!(
            "{}: expected magic {:?}, found {:?}",
            path.display(),
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&found)
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let config = r.string()?;
    let n = r.u32()? as usize;
    let mut names = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        names.push(r.string()?);
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("parameter rank {rank} is implausible")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        values.push(Tensor::new(shape, r.f64s(numel)?)?);
    }
    r.expect_eof()?;
    Ok((config, ParamStore::from_parts(names, values)))
}

/// Copies values from `loaded` into `target`, requiring identical names and shapes.
pub(crate) fn restore(target: &mut ParamStore, loaded: ParamStore) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::Architecture(format!(
            "checkpoint holds {} parameters, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    let ids: Vec<_> = target.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(loaded.iter()) {
        if target.name(id) != name || target.get(id).shape() != t.shape() {
            return Err(Error::Architecture(format!(
                "parameter {} {:?} does not match checkpoint entry {} {:?}",
                target.name(id),
                target.get(id).shape(),
                name,
                t.shape()
            )));
        }
        *target.get_mut(id) = t.clone();
    }
    Ok(())
}
