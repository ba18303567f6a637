//! HTMN checkpoint files.
//!
//! Layout (little-endian): `HTMN`, u32 version (1), u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//! u8 rank, rank × u32 dims and the payload. A trailing u64 holds the FNV-1a
//! hash of every preceding byte.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use htmnet_core::params::ParamStore;
use htmnet_core::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"HTMN";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("checkpoint ends early")]
    Truncated,
    #[error("tensor `{name}` has unknown dtype {dtype}")]
    Dtype { name: String, dtype: u8 },
    #[error("tensor name is not valid UTF-8")]
    Name,
    #[error("tensor `{0}` appears more than once")]
    Duplicate(String),
    #[error("checkpoint lacks parameter `{0}`")]
    Missing(String),
    #[error("checkpoint has unexpected tensor `{0}`")]
    Unexpected(String),
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// One decoded tensor, values widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * std::mem::size_of::<T>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            match T::DTYPE {
                0 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
                _ => out.extend_from_slice(&v.f64().to_le_bytes()),
            }
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 20 {
        return Err(CheckpointError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("eight bytes"));
    let computed = fnv1a(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Name)?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(CheckpointError::Truncated)?;
        let values = match dtype {
            0 => r
                .take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
                .collect(),
            1 => r
                .take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect(),
            _ => return Err(CheckpointError::Dtype { name, dtype }),
        };
        entries.push(Entry {
            name,
            dtype,
            shape,
            values,
        });
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Truncated);
    }
    Ok(entries)
}

/// Overwrites every parameter of `store` from `bytes`. The checkpoint must
/// contain exactly the store's parameter names, each once, with matching
/// shapes.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<(), CheckpointError> {
    let entries = decode(bytes)?;
    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert(e.name.as_str()) {
            return Err(CheckpointError::Duplicate(e.name.clone()));
        }
        if store.find(&e.name).is_none() {
            return Err(CheckpointError::Unexpected(e.name.clone()));
        }
    }
    if let Some(missing) = store.names().iter().find(|n| !seen.contains(n.as_str())) {
        return Err(CheckpointError::Missing(missing.clone()));
    }
    for e in entries {
        let id = store.find(&e.name).expect("checked above");
        let expected = store.get(id).shape().to_vec();
        if expected != e.shape {
            return Err(CheckpointError::Shape {
                name: e.name,
                expected,
                found: e.shape,
            });
        }
        let value = Tensor::<T>::from_f64(&e.shape, &e.values).map_err(|_| CheckpointError::Truncated)?;
        store.set(id, value);
    }
    Ok(())
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(store)).map_err(|source| CheckpointError::Io {
        path: path.into(),
        source,
    })
}

pub fn load<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.into(),
        source,
    })?;
    load_into(store, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use htmnet_core::model::{HtmNet, ModelConfig};

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn header_layout() {
        let (_, store) = HtmNet::init::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let bytes = encode(&store);
        assert_eq!(&bytes[..4], b"HTMN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, store.len());
        let first = &store.names()[0];
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize, first.len());
        assert_eq!(&bytes[14..14 + first.len()], first.as_bytes());
        assert_eq!(bytes[14 + first.len()], 0);
    }

    #[test]
    fn round_trip_is_bit_exact_in_both_precisions() {
        let (_, a) = HtmNet::init::<f32>(&ModelConfig::tiny(), 1).unwrap();
        let (_, mut b) = HtmNet::init::<f32>(&ModelConfig::tiny(), 2).unwrap();
        load_into(&mut b, &encode(&a)).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.bit_eq(y)));

        let (_, c) = HtmNet::init::<f64>(&ModelConfig::tiny(), 3).unwrap();
        let (_, mut d) = HtmNet::init::<f64>(&ModelConfig::tiny(), 4).unwrap();
        load_into(&mut d, &encode(&c)).unwrap();
        assert!(c.values().iter().zip(d.values()).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn corruption_is_detected() {
        let (_, store) = HtmNet::init::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let bytes = encode(&store);
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode(&flipped), Err(CheckpointError::Checksum { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode(&bytes[..10]), Err(CheckpointError::Truncated)));
        // Truncation with a recomputed checksum still fails structurally.
        let mut short = bytes[..bytes.len() - 12].to_vec();
        let sum = fnv1a(&short);
        short.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(decode(&short), Err(CheckpointError::Truncated)));
    }

    #[test]
    fn parameter_sets_must_match() {
        let (_, tiny) = HtmNet::init::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.msfm = false;
        let (_, mut other) = HtmNet::init::<f32>(&cfg, 0).unwrap();
        assert!(matches!(
            load_into(&mut other, &encode(&tiny)),
            Err(CheckpointError::Unexpected(_))
        ));
        let (_, mut bigger) = HtmNet::init::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let (_, small) = HtmNet::init::<f32>(&cfg, 0).unwrap();
        assert!(matches!(load_into(&mut bigger, &encode(&small)), Err(CheckpointError::Missing(_))));
    }
}
