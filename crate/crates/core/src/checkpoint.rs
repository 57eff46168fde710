//! Versioned binary container with named sections and a SHA-256 trailer.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CTSRCKPT"
//! version  u32
//! count    u32
//! count x { name_len u16, name utf-8, payload_len u64, payload }
//! sha256   32 bytes over everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CTSRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    sections: BTreeMap<String, Vec<u8>>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn put(&mut self, name: &str, payload: Vec<u8>) {
        self.sections.insert(name.to_string(), payload);
    }

    pub fn put_f64s(&mut self, name: &str, values: &[f64]) {
        self.put(name, f64s_to_bytes(values));
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.put(name, v.to_le_bytes().to_vec());
    }

    pub fn put_str(&mut self, name: &str, s: &str) {
        self.put(name, s.as_bytes().to_vec());
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn get_f64s(&self, name: &str) -> Result<Vec<f64>> {
        bytes_to_f64s(self.get(name)?)
            .ok_or_else(|| Error::Checkpoint(format!("section `{name}` is not a f64 array")))
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let b = self.get(name)?;
        let arr: [u8; 8] = b
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("section `{name}` is not a u64")))?;
        Ok(u64::from_le_bytes(arr))
    }

    pub fn get_str(&self, name: &str) -> Result<&str> {
        std::str::from_utf8(self.get(name)?)
            .map_err(|_| Error::Checkpoint(format!("section `{name}` is not utf-8")))
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + 32 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("section name is not utf-8".into()))?
                .to_string();
            let plen = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            sections.insert(name, r.take(plen)?.to_vec());
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Container { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_tamper_detection() {
        let mut c = Container::new();
        c.put_f64s("params", &[1.5, -2.0, f64::MIN_POSITIVE]);
        c.put_u64("seed", 42);
        c.put_str("topology", "{}");
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get_u64("seed").unwrap(), 42);
        assert_eq!(back.get_f64s("params").unwrap(), vec![1.5, -2.0, f64::MIN_POSITIVE]);

        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(Container::from_bytes(&bad).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(back.get("nope").is_err());
    }

    #[test]
    fn params_are_little_endian_f64() {
        let bytes = f64s_to_bytes(&[1.0]);
        assert_eq!(bytes, 1.0f64.to_le_bytes().to_vec());
    }
}
