//! Binary checkpoint container.
//!
//! Layout (little-endian): `b"MMSF"`, `u32` version, `u32` config length +
//! UTF-8 config text, `u32` parameter count, then per parameter `u32` name
//! length + name, `u32` rank, `u64` per dimension and the `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::layers::ParamStore;

pub const MAGIC: &[u8; 4] = b"MMSF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_store(config_text: &str, store: &ParamStore) -> Self {
        Self {
            version: VERSION,
            config_text: config_text.to_string(),
            params: store
                .iter()
                .map(|(name, t)| StoredParam {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| "truncated header".to_string())?;
        if &magic != MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let config_text = get_str(&mut r)?;
        let count = get_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let rank = get_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(format!("parameter `{name}` has rank {rank}"));
            }
            let shape = (0..rank)
                .map(|_| get_u64(&mut r).map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            if r.len() < n * 8 {
                return Err(format!("parameter `{name}` is truncated"));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[n * 8..];
            params.push(StoredParam { name, shape, data });
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(Self {
            version,
            config_text,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|m| Error::format(path, m))
    }

    /// Copies every stored tensor into `store`. Names and shapes must
    /// match one to one.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store
                .find(&p.name)
                .ok_or_else(|| Error::Config(format!("model has no parameter `{}`", p.name)))?;
            if store.get(id).shape() != p.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}`: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    p.shape,
                    store.get(id).shape()
                )));
            }
            store.set(&p.name, p.data.clone())?;
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| "truncated u32".to_string())?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8]) -> std::result::Result<u64, String> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| "truncated u64".to_string())?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> std::result::Result<String, String> {
    let n = get_u32(r)? as usize;
    if r.len() < n {
        return Err("truncated string".into());
    }
    let s = std::str::from_utf8(&r[..n]).map_err(|e| e.to_string())?.to_string();
    *r = &r[n..];
    Ok(s)
}
