//! Flat binary parameter checkpoints.
//!
//! Layout: magic bytes `MLDA`, u32 LE format version, then EOF-delimited
//! per-parameter records of (u32 LE name length, name bytes, u32 LE rank,
//! u32 LE extents, little-endian f32 values).

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::optim::ParamStore;

const MAGIC: &[u8; 4] = b"MLDA";
const VERSION: u32 = 1;

/// One serialized parameter record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn save_records(records: &[Record], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for rec in records {
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(rec.shape.len() as u32).to_le_bytes())?;
        for &d in &rec.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &rec.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r)?
        .ok_or_else(|| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {}",
            path.display(),
            version
        )));
    }
    let mut records = Vec::new();
    loop {
        let Some(name_len) = read_u32(&mut r)? else {
            break; // clean EOF between records
        };
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("invalid parameter name: {e}")))?;
        let rank = read_u32(&mut r)?
            .ok_or_else(|| Error::Checkpoint(format!("truncated record {name:?}")))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = read_u32(&mut r)?
                .ok_or_else(|| Error::Checkpoint(format!("truncated shape of {name:?}")))?;
            shape.push(d as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated values of {name:?}: {e}")))?;
            values.push(f32::from_le_bytes(buf));
        }
        records.push(Record { name, shape, values });
    }
    Ok(records)
}

fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    match r.read_exact(&mut buf) {
        Ok(()) => Ok(Some(u32::from_le_bytes(buf))),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Serialize a whole store, in registration order.
pub fn save_store<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let records: Vec<Record> = store
        .iter()
        .map(|(_, p)| Record {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            values: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
        .collect();
    save_records(&records, path)
}

/// Load a checkpoint into a store: values of matching names are replaced
/// (shapes must agree); names absent from the store are appended as new
/// parameters.
pub fn load_into_store<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    for rec in load_records(path)? {
        let values: Vec<T> = rec.values.iter().map(|&v| T::of(f64::from(v))).collect();
        match store.id_of(&rec.name) {
            Some(id) => {
                let existing = store.get(id).value.shape().to_vec();
                if existing != rec.shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {:?} has shape {:?} in checkpoint but {:?} in model",
                        rec.name, rec.shape, existing
                    )));
                }
                let p = store.get_mut(id);
                *p.value.data_mut() = values;
            }
            None => {
                store.register_with(&rec.name, rec.shape, values);
            }
        }
    }
    Ok(())
}

/// Like [`load_into_store`], but every parameter already registered in the
/// store must be present in the file; loading a checkpoint that silently
/// leaves model weights at their random init is almost always a bug.
pub fn load_into_store_requiring_all<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let records = load_records(path)?;
    let names: std::collections::HashSet<&str> = records.iter().map(|r| r.name.as_str()).collect();
    for (_, p) in store.iter() {
        if !names.contains(p.name.as_str()) {
            return Err(Error::Checkpoint(format!(
                "{} is missing parameter {:?}",
                path.display(),
                p.name
            )));
        }
    }
    for rec in records {
        let values: Vec<T> = rec.values.iter().map(|&v| T::of(f64::from(v))).collect();
        match store.id_of(&rec.name) {
            Some(id) => {
                let existing = store.get(id).value.shape().to_vec();
                if existing != rec.shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {:?} has shape {:?} in checkpoint but {:?} in model",
                        rec.name, rec.shape, existing
                    )));
                }
                let p = store.get_mut(id);
                *p.value.data_mut() = values;
            }
            None => {
                store.register_with(&rec.name, rec.shape, values);
            }
        }
    }
    Ok(())
}
