//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SHOICKPT"
//! version    u32      1
//! digest     u32 length + UTF-8 hex config digest
//! step       u64      steps completed
//! count      u32      number of blobs
//! blob*      u32 name length + UTF-8 name
//!            u32 rank, rank x u64 dims
//!            product(dims) x f64 values
//! ```
//!
//! Parameters are stored under their own names; optimizer moments under
//! `{name}#m`, `{name}#v` and the per-parameter step count as a scalar
//! `{name}#t`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 8] = b"SHOICKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: String,
    pub step: u64,
    pub blobs: Vec<(String, Tensor)>,
}

fn bad(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

impl Checkpoint {
    pub fn blob(&self, name: &str) -> Option<&Tensor> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.digest.len() as u32).to_le_bytes());
        out.extend_from_slice(self.digest.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, t) in &self.blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad("truncated checkpoint"));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32_of(take(4)?);
        if version != VERSION as usize {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u32_of(take(4)?);
        let digest = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("digest is not UTF-8"))?;
        let step = u64_of(take(8)?);
        let count = u32_of(take(4)?);
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32_of(take(4)?);
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("blob name is not UTF-8"))?;
            let rank = u32_of(take(4)?);
            let shape: Vec<usize> = (0..rank).map(|_| take(8).map(|b| u64_of(b) as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = take(n.checked_mul(8).ok_or_else(|| bad("blob too large"))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blobs.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after last blob"));
        }
        Ok(Self { digest, step, blobs })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the checkpoint was written for `digest`.
    pub fn expect_digest(&self, digest: &str) -> Result<()> {
        if self.digest != digest {
            return Err(Error::DigestMismatch { checkpoint: self.digest.clone(), config: digest.to_string() });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            digest: "abc123".into(),
            step: 42,
            blobs: vec![
                ("w".into(), Tensor::new(vec![2, 2], vec![1.0, -0.5, 1e-300, f64::MAX]).unwrap()),
                ("w#t".into(), Tensor::scalar(3.0)),
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 6);
        assert_eq!(&b[16..22], b"abc123");
        assert_eq!(u64::from_le_bytes(b[22..30].try_into().unwrap()), 42);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = b;
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }

    #[test]
    fn digest_check() {
        let c = sample();
        assert!(c.expect_digest("abc123").is_ok());
        assert!(matches!(c.expect_digest("zzz"), Err(Error::DigestMismatch { .. })));
    }
}
