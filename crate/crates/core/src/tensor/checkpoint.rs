//! Binary checkpoint container.
//!
//! ```text
//! magic   b"SPCNAVCK"
//! u32     format version
//! u64     header length, then UTF-8 JSON header (hyper-parameters, vocab, ...)
//! u32     parameter count
//! per parameter:
//!   u32 name length, name bytes
//!   u32 ndim, u64 x ndim dims
//!   u64 adam step, u8 moments flag
//!   f64 x numel values, then (if flagged) f64 x numel first and second moments
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SPCNAVCK";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub header: serde_json::Value,
    pub params: ParamStore,
}

pub fn save_checkpoint(
    path: &Path,
    header: &serde_json::Value,
    params: &ParamStore,
    with_moments: bool,
) -> Result<()> {
    let bytes = encode(header, params, with_moments)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

pub(crate) fn encode(header: &serde_json::Value, params: &ParamStore, with_moments: bool) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let h = serde_json::to_vec(header)?;
    out.write_all(&(h.len() as u64).to_le_bytes())?;
    out.write_all(&h)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, p) in params.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&(p.tensor.shape.len() as u32).to_le_bytes())?;
        for &d in &p.tensor.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        out.write_all(&p.step.to_le_bytes())?;
        out.write_all(&[with_moments as u8])?;
        write_f64s(&mut out, &p.tensor.data)?;
        if with_moments {
            write_f64s(&mut out, &p.m)?;
            write_f64s(&mut out, &p.v)?;
        }
    }
    Ok(out)
}

pub(crate) fn decode(mut bytes: &[u8]) -> Result<Checkpoint> {
    let r = &mut bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = read_u64(r)? as usize;
    let mut h = vec![0u8; hlen];
    r.read_exact(&mut h)?;
    let header: serde_json::Value = serde_json::from_slice(&h)?;
    let n = read_u32(r)?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ndim = read_u32(r)? as usize;
        let shape = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let step = read_u64(r)?;
        let mut flag = [0u8];
        r.read_exact(&mut flag)?;
        let data = read_f64s(r, numel)?;
        let tensor = Tensor::new(shape, data)?;
        let id = params.add(name, tensor)?;
        let p = params.get_mut(id);
        p.step = step;
        if flag[0] == 1 {
            p.m = read_f64s(r, numel)?;
            p.v = read_f64s(r, numel)?;
        }
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    Ok(Checkpoint {
        version,
        header,
        params,
    })
}

fn write_f64s(out: &mut Vec<u8>, xs: &[f64]) -> std::io::Result<()> {
    out.reserve(xs.len() * 8);
    for x in xs {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    if r.len() < n * 8 {
        return Err(Error::Checkpoint("truncated tensor data".into()));
    }
    let (head, tail) = r.split_at(n * 8);
    let out = head
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *r = tail;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let a = s.add("enc.weight", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 1e-300, f64::MAX, -0.0]).unwrap()).unwrap();
        s.add("stop.bias", Tensor::vector(vec![0.25])).unwrap();
        let p = s.get_mut(a);
        p.step = 7;
        p.m = vec![0.1; 6];
        p.v = vec![0.2; 6];
        s
    }

    #[test]
    fn round_trip_preserves_bits_and_moments() {
        let s = store();
        let header = serde_json::json!({"hidden": 8, "vocab": ["a", "b"]});
        let bytes = encode(&header, &s, true).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.header, header);
        assert_eq!(ck.version, CHECKPOINT_VERSION);
        let mut restored = ck.params;
        for p in restored.iter_mut() {
            p.tensor.requires_grad = true;
        }
        assert_eq!(restored, s);
    }

    #[test]
    fn without_moments_resets_optimizer_buffers() {
        let s = store();
        let ck = decode(&encode(&serde_json::json!({}), &s, false).unwrap()).unwrap();
        let id = ck.params.id("enc.weight").unwrap();
        assert_eq!(ck.params.get(id).m, vec![0.0; 6]);
        assert_eq!(ck.params.get(id).step, 7);
    }

    #[test]
    fn rejects_corrupted_input() {
        let s = store();
        let mut bytes = encode(&serde_json::json!({}), &s, true).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }
}
