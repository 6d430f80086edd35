use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"3AW1";
const DTYPE_F32: u8 = 0;
const MAX_RANK: u8 = 4;

struct Entry {
    name: String,
    shape: Vec<usize>,
    bytes: u64,
}

/// Serialises every tensor (running statistics included) at single precision.
pub fn encode_weights(p: &impl Parameters) -> Vec<u8> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    p.visit("", &mut |name, t| {
        let data = t.data().iter().map(|&v| v as f32).collect();
        tensors.push((name.to_string(), t.shape().to_vec(), data));
    });
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
    }
    for (_, _, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_weights(p: &impl Parameters, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(p))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Weights(format!(
                "truncated at byte {} while reading {what}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a weight file into named tensors, in file order.
pub fn decode_weights(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Weights("bad magic, not a 3AW1 weight file".into()));
    }
    let mut cur = Cursor {
        buf,
        pos: MAGIC.len(),
    };
    let count = cur.u32("tensor count")? as usize;
    let mut entries = Vec::new();
    for i in 0..count {
        let what = format!("manifest entry {i}");
        let len = cur.u32(&what)? as usize;
        let name = std::str::from_utf8(cur.take(len, &what)?)
            .map_err(|_| Error::Weights(format!("{what}: name is not utf-8")))?
            .to_string();
        let dtype = cur.u8(&name)?;
        if dtype != DTYPE_F32 {
            return Err(Error::Weights(format!("{name}: unsupported dtype {dtype}")));
        }
        let rank = cur.u8(&name)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Weights(format!("{name}: unsupported rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| cur.u32(&name).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let bytes = cur.u64(&name)?;
        let numel: usize = shape.iter().product();
        if bytes != (numel as u64) * 4 {
            return Err(Error::Weights(format!(
                "{name}: manifest says {bytes} bytes for shape {shape:?}"
            )));
        }
        entries.push(Entry { name, shape, bytes });
    }
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let remaining = (buf.len() - cur.pos) as u64;
        if remaining < e.bytes {
            return Err(Error::Weights(format!(
                "truncated payload for tensor {} ({} of {} bytes present)",
                e.name, remaining, e.bytes
            )));
        }
        let raw = cur.take(e.bytes as usize, &e.name)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        out.push((e.name, Tensor::new(&e.shape, data)?));
    }
    if cur.pos != buf.len() {
        return Err(Error::Weights(format!(
            "{} trailing bytes after the last payload",
            buf.len() - cur.pos
        )));
    }
    Ok(out)
}

/// Overwrites every tensor of `p` from `buf`; names must match exactly.
pub fn load_weights(p: &mut impl Parameters, buf: &[u8]) -> Result<()> {
    let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in decode_weights(buf)? {
        if stored.insert(name.clone(), t).is_some() {
            return Err(Error::Weights(format!("duplicate tensor {name}")));
        }
    }
    let mut failure: Option<Error> = None;
    p.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        match stored.remove(name) {
            None => failure = Some(Error::Weights(format!("missing tensor {name}"))),
            Some(s) if s.shape() != t.shape() => {
                failure = Some(Error::Weights(format!(
                    "tensor {name}: file shape {:?}, model shape {:?}",
                    s.shape(),
                    t.shape()
                )))
            }
            Some(s) => *t = s,
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::Weights(format!("unknown tensor {name}")));
    }
    Ok(())
}

/// SHA-256 over names, shapes and single-precision values, hex encoded.
pub fn checksum(p: &impl Parameters) -> String {
    let mut h = Sha256::new();
    p.visit("", &mut |name, t| {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            h.update((v as f32).to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}
