//! Self-describing binary checkpoints: magic bytes, format version, named
//! typed entries, and a trailing integrity checksum.

use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{LaceError, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"LACE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl EntryData {
    fn type_tag(&self) -> u8 {
        match self {
            EntryData::F64(_) => 0,
            EntryData::U64(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn scalar_u64(name: impl Into<String>, v: u64) -> Entry {
        Entry {
            name: name.into(),
            shape: vec![1],
            data: EntryData::U64(vec![v]),
        }
    }

    pub fn as_u64(&self) -> Result<u64> {
        match &self.data {
            EntryData::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(LaceError::Checkpoint(format!(
                "entry {:?} is not a u64 scalar",
                self.name
            ))),
        }
    }
}

fn corrupt(msg: &str) -> LaceError {
    LaceError::Checkpoint(msg.to_string())
}

pub fn serialize(entries: &[Entry]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.data.type_tag());
        buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &e.data {
            EntryData::F64(v) => {
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            EntryData::U64(v) => {
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn deserialize(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 4 + 4 + 4 + 32 {
        return Err(corrupt("checkpoint truncated"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(corrupt("checksum mismatch"));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(corrupt("checkpoint truncated"));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(LaceError::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| corrupt("entry name not utf-8"))?;
        let tag = take(&mut pos, 1)?[0];
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let data = match tag {
            0 => {
                let raw = take(&mut pos, n * 8)?;
                EntryData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                let raw = take(&mut pos, n * 8)?;
                EntryData::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            _ => return Err(corrupt("unknown entry type tag")),
        };
        entries.push(Entry { name, shape, data });
    }
    if pos != body.len() {
        return Err(corrupt("trailing bytes after entries"));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&serialize(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Entry>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    deserialize(&buf)
}

/// Dump every parameter of a store as `<prefix>.<name>` entries.
pub fn store_entries(prefix: &str, store: &ParamStore) -> Vec<Entry> {
    store
        .entries()
        .map(|(name, r, shape)| Entry {
            name: format!("{prefix}.{name}"),
            shape: shape.to_vec(),
            data: EntryData::F64(store.get(r).to_vec()),
        })
        .collect()
}

/// Copy `<prefix>.<name>` entries back into an identically laid out store.
pub fn load_store(prefix: &str, entries: &[Entry], store: &mut ParamStore) -> Result<()> {
    let named: Vec<(String, crate::nn::ParamRef, Vec<usize>)> = store
        .entries()
        .map(|(n, r, s)| (n.to_string(), r, s.to_vec()))
        .collect();
    for (name, r, shape) in named {
        let full = format!("{prefix}.{name}");
        let e = entries
            .iter()
            .find(|e| e.name == full)
            .ok_or_else(|| LaceError::Checkpoint(format!("missing entry {full:?}")))?;
        if e.shape != shape {
            return Err(LaceError::Checkpoint(format!(
                "entry {full:?} has shape {:?}, store expects {:?}",
                e.shape, shape
            )));
        }
        match &e.data {
            EntryData::F64(v) => store.get_mut(r).copy_from_slice(v),
            _ => return Err(LaceError::Checkpoint(format!("entry {full:?} not f64"))),
        }
    }
    Ok(())
}

pub fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| LaceError::Checkpoint(format!("missing entry {name:?}")))
}
