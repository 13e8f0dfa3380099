//! Named-parameter checkpoint files.
//!
//! ```text
//! "LILM"  version:u16  count:u32
//! count x { name_len:u16  name:utf8  trainable:u8  rank:u8  dims:u32[rank]  values:f32[] }
//! ```

use lilac_autodiff::{ParamStore, Parameter, Scalar, Tensor};

use crate::error::{LilacError, Result};

pub const MAGIC: &[u8; 4] = b"LILM";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor<f32>,
}

/// Serialises tables under name prefixes, e.g. `("encoders/", &store)`.
pub fn encode<T: Scalar>(tables: &[(String, &ParamStore<T>)]) -> Vec<u8> {
    let entries: Vec<(String, &Parameter<T>)> = tables
        .iter()
        .flat_map(|(prefix, s)| s.iter().map(move |p| (format!("{prefix}{}", p.id), p)))
        .collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, p) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.trainable as u8);
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(LilacError::Parse(format!("checkpoint truncated at byte {pos}")));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != MAGIC {
        return Err(LilacError::Parse("bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(LilacError::Parse(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|e| LilacError::Parse(e.to_string()))?;
        let trainable = take(1)?[0] != 0;
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| LilacError::Parse(e.to_string()))?;
        entries.push(Entry {
            name,
            trainable,
            value,
        });
    }
    if pos != bytes.len() {
        return Err(LilacError::Parse("trailing bytes after checkpoint".into()));
    }
    Ok(entries)
}

/// Overwrites values of `store` from entries under `prefix`. Every parameter
/// of the table must be present with a matching shape.
pub fn restore<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, entries: &[Entry]) -> Result<()> {
    for p in store.iter_mut() {
        let name = format!("{prefix}{}", p.id);
        let e = entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| LilacError::Lookup(format!("checkpoint lacks {name}")))?;
        if e.value.shape() != p.value.shape() {
            return Err(LilacError::Parse(format!("shape mismatch for {name}")));
        }
        p.value = e.value.cast();
        p.trainable = e.trainable;
    }
    Ok(())
}
