//! Checkpoint container: `GFCKPT01`, u64 LE header length, JSON header,
//! then the little-endian f32 payloads at the header's byte offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GFCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn encode_checkpoint(store: &ParamStore<f32>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut tensors = Vec::new();
    for (_, name, t) in store.iter() {
        tensors.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        tensors,
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, t) in store.iter() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body])?;
    let payload = &bytes[body..];
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(bad(&format!("tensor {} extends past end of file", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&e.name, Tensor::new(&e.shape, data)?)?;
    }
    Ok((store, header.meta))
}

pub fn write_checkpoint(path: &Path, store: &ParamStore<f32>, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(store, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25]).unwrap())
            .unwrap();
        s.insert("b", Tensor::from_vec(vec![7.0])).unwrap();
        let meta = serde_json::json!({"epoch": 3});
        let bytes = encode_checkpoint(&s, &meta).unwrap();
        let (back, m) = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(m, meta);
        for ((_, n1, t1), (_, n2, t2)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|x| x.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(decode_checkpoint(b"not a checkpoint at all", Path::new("x")).is_err());
    }
}
