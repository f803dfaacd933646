//! Named-tensor container used for checkpoints and reconstruction dumps.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "P2N2" | version u16
//! repeated until end of file:
//!   name_len u32 | name (UTF-8) | rows u32 | cols u32 | rows*cols f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"P2N2";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        for (name, t) in &self.entries {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.rows() as u32).to_le_bytes());
            out.extend((t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
        if bytes.len() < 6 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut r = &bytes[6..];
        let u32_at = |r: &mut &[u8]| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(b))
        };
        let mut archive = TensorArchive::new();
        while !r.is_empty() {
            let len = u32_at(&mut r)? as usize;
            if r.len() < len {
                return Err(bad("truncated name"));
            }
            let name = std::str::from_utf8(&r[..len]).map_err(|_| bad("name is not UTF-8"))?.to_string();
            r = &r[len..];
            let rows = u32_at(&mut r)? as usize;
            let cols = u32_at(&mut r)? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| bad("dims overflow"))?;
            if r.len() < n * 8 {
                return Err(bad(&format!("tensor `{name}` truncated")));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[n * 8..];
            archive.push(name, Tensor::from_vec(rows, cols, data)?);
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut a = TensorArchive::new();
        a.push("w", Tensor::from_vec(2, 2, vec![1.0, -0.5, f64::MIN_POSITIVE, 3e10]).unwrap());
        a.push("b", Tensor::zeros(1, 3));
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..6], b"P2N2\x01\x00");
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert!(TensorArchive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(back.require("missing").is_err());
    }
}
