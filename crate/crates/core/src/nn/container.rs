//! Versioned binary tensor container used for checkpoints, patch caches and
//! embedding caches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "EYTC"
//! version    u32      currently 1
//! meta_len   u32      byte length of the JSON metadata that follows
//! meta       meta_len UTF-8 JSON object
//! n_tensors  u32
//! table      n_tensors entries:
//!              name_len u16, name (UTF-8), dtype u8 (0 = f32, 1 = f64),
//!              ndim u8, dims ndim × u64, offset u64 (into the data section)
//! data       raw little-endian element buffers
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{NnError, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"EYTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

/// In-memory form of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub entries: Vec<Entry>,
}

fn err(msg: impl Into<String>) -> NnError {
    NnError::Container(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| err("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self { metadata, entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: DType, tensor: Tensor) {
        self.entries.push(Entry { name: name.into(), dtype, tensor });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| err(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| err("metadata too large"))?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| err("too many tensors"))?.to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| err("tensor name too long"))?.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.dtype as u8);
            let shape = e.tensor.shape();
            out.push(u8::try_from(shape.len()).map_err(|_| err("too many dimensions"))?);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (e.tensor.len() * e.dtype.size()) as u64;
        }
        for e in &self.entries {
            match e.dtype {
                DType::F32 => e.tensor.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => e.tensor.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| err(format!("metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| err("tensor name is not UTF-8"))?.to_string();
            let dtype = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                d => return Err(err(format!("unknown dtype {d} for {name}"))),
            };
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| err("dimension overflow"))?);
            }
            let offset = usize::try_from(r.u64()?).map_err(|_| err("offset overflow"))?;
            table.push((name, dtype, shape, offset));
        }
        let data = &buf[r.pos..];
        let mut entries = Vec::with_capacity(table.len());
        let mut expected_end = 0usize;
        for (name, dtype, shape, offset) in table {
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| err("shape overflow"))?;
            let bytes = count.checked_mul(dtype.size()).ok_or_else(|| err("shape overflow"))?;
            let end = offset.checked_add(bytes).filter(|&e| e <= data.len()).ok_or_else(|| err(format!("tensor {name} out of bounds")))?;
            let raw = &data[offset..end];
            let values: Vec<f64> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            expected_end = expected_end.max(end);
            entries.push(Entry { name, dtype, tensor: Tensor::from_vec(&shape, values)? });
        }
        if expected_end != data.len() {
            return Err(err(format!("{} trailing bytes", data.len() - expected_end)));
        }
        Ok(Self { metadata, entries })
    }

    pub fn write_file(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| err(format!("{}: {e}", path.display())))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read_file(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        Ok((Self::from_bytes(&bytes)?, sha256_hex(&bytes)))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a parameter list, independent of container metadata.
pub fn params_hash(params: &[&Tensor]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update((p.shape().len() as u64).to_le_bytes());
        for &d in p.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"kind": "test", "step": 3}));
        c.push("a", DType::F64, Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0]).unwrap());
        c.push("b", DType::F32, Tensor::vector(vec![0.5, 0.25]));
        c.push("empty", DType::F64, Tensor::zeros(&[0]));
        c
    }

    #[test]
    fn round_trip_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let mut c = Container::new(serde_json::json!({}));
        c.push("w", DType::F64, Tensor::vector(vec![1.0]));
        let b = c.to_bytes().unwrap();
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(&b[12..14], b"{}");
        assert_eq!(u32::from_le_bytes(b[14..18].try_into().unwrap()), 1);
        // name_len, "w", dtype, ndim, one dim, offset, then 8 data bytes.
        assert_eq!(b.len(), 18 + 2 + 1 + 1 + 1 + 8 + 8 + 8);
        assert_eq!(f64::from_le_bytes(b[b.len() - 8..].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Container::from_bytes(&long).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(Container::from_bytes(&ver).is_err());
    }

    #[test]
    fn params_hash_tracks_values_and_shape() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap();
        assert_ne!(params_hash(&[&a]), params_hash(&[&b]));
        assert_eq!(params_hash(&[&a]), params_hash(&[&a.clone()]));
    }
}
