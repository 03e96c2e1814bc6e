//! Versioned binary container used for scene geometry and model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[4] | u16 version_len | version utf8 | u64 header_len | header utf8 (JSON)
//!          | u64 payload_len | payload bytes | sha256[32] of everything before
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub struct Container {
    pub version: String,
    pub header: String,
    pub payload: Vec<u8>,
}

pub fn encode(magic: &[u8; 4], version: &str, header: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(version.len() as u16).to_le_bytes());
    out.extend_from_slice(version.as_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn write(path: &Path, magic: &[u8; 4], version: &str, header: &str, payload: &[u8]) -> Result<()> {
    fs::write(path, encode(magic, version, header, payload)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, magic: &[u8; 4], expected_version: &str) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, magic, expected_version).map_err(|e| match e {
        Error::Integrity { reason, .. } => Error::Integrity { path: path.to_path_buf(), reason },
        other => other,
    })
}

pub fn decode(bytes: &[u8], magic: &[u8; 4], expected_version: &str) -> Result<Container> {
    let bad = |reason: &str| Error::Integrity { path: Default::default(), reason: reason.to_string() };
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).ok_or_else(|| bad("truncated magic"))? != magic {
        return Err(bad("wrong magic bytes"));
    }
    let vlen = u16::from_le_bytes(cur.array().ok_or_else(|| bad("truncated version"))?) as usize;
    let version = String::from_utf8(cur.take(vlen).ok_or_else(|| bad("truncated version"))?.to_vec())
        .map_err(|_| bad("version is not utf-8"))?;
    // version is checked before the digest so a foreign-version file reports as such
    if version != expected_version {
        return Err(Error::Version { found: version, expected: expected_version.to_string() });
    }
    let hlen = u64::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header length"))?) as usize;
    let header = String::from_utf8(cur.take(hlen).ok_or_else(|| bad("truncated header"))?.to_vec())
        .map_err(|_| bad("header is not utf-8"))?;
    let plen = u64::from_le_bytes(cur.array().ok_or_else(|| bad("truncated payload length"))?) as usize;
    let payload = cur.take(plen).ok_or_else(|| bad("truncated payload"))?.to_vec();
    let body_end = cur.pos;
    let digest = cur.take(32).ok_or_else(|| bad("missing checksum"))?;
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes after checksum"));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    Ok(Container { version, header, payload })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("length checked"))
    }
}

/// Little-endian packing helpers for the payload section.
pub mod pack {
    pub fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn put_i32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = i32>) {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn put_f64s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        pub fn new(bytes: &'a [u8]) -> Self {
            Self { bytes, pos: 0 }
        }

        fn chunk<const N: usize>(&mut self) -> Option<[u8; N]> {
            let s = self.bytes.get(self.pos..self.pos + N)?;
            self.pos += N;
            Some(s.try_into().expect("length checked"))
        }

        pub fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
            (0..n).map(|_| self.chunk::<4>().map(f32::from_le_bytes)).collect()
        }

        pub fn i32s(&mut self, n: usize) -> Option<Vec<i32>> {
            (0..n).map(|_| self.chunk::<4>().map(i32::from_le_bytes)).collect()
        }

        pub fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
            (0..n).map(|_| self.chunk::<8>().map(f64::from_le_bytes)).collect()
        }

        pub fn is_done(&self) -> bool {
            self.pos == self.bytes.len()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = encode(b"TEST", "v1", "{}", &[1, 2, 3, 4]);
        assert!(decode(&bytes, b"TEST", "v1").is_ok());
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut], b"TEST", "v1"), Err(Error::Integrity { .. })));
        }
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 40] ^= 0xff;
        assert!(matches!(decode(&flipped, b"TEST", "v1"), Err(Error::Integrity { .. })));
    }

    #[test]
    fn foreign_version_is_a_version_error() {
        let bytes = encode(b"TEST", "v999", "{}", &[]);
        assert!(matches!(decode(&bytes, b"TEST", "v1"), Err(Error::Version { .. })));
    }
}
