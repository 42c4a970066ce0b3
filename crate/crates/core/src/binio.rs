//! Shared binary container plumbing for the UAPDATA/UAPCKPT/UAPPERT formats.
//!
//! Layout common to all three: an 8-byte magic (7-byte kind + ASCII version
//! digit), a body of little-endian fields, and a trailing CRC32 (IEEE) over
//! every body byte. Readers parse structurally first so truncation surfaces
//! as a distinct error from checksum corruption.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VERSION: u8 = b'1';

/// Accumulates body bytes; `finish` prepends the magic and appends the CRC.
pub struct ContainerWriter {
    magic: &'static [u8; 8],
    body: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(magic: &'static [u8; 8]) -> Self {
        ContainerWriter {
            magic,
            body: Vec::new(),
        }
    }

    pub fn u8(&mut self, v: u8) {
        self.body.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.body.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.body.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.body.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.body.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64_slice(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    /// Length-prefixed byte block (u32 length).
    pub fn block(&mut self, bytes: &[u8]) {
        self.u32(bytes.len() as u32);
        self.body.extend_from_slice(bytes);
    }

    /// Tensor as rank (u32), dims (u32 each), then the payload reals.
    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for d in t.dims() {
            self.u32(*d as u32);
        }
        self.f64_slice(t.data());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.body);
        let mut out = Vec::with_capacity(8 + self.body.len() + 4);
        out.extend_from_slice(self.magic);
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn write(self, path: &Path) -> Result<()> {
        fs::write(path, self.into_bytes())?;
        Ok(())
    }
}

/// Cursor over a container body. Construction validates magic and version;
/// the CRC is checked by `finish` once the body has been fully consumed.
#[derive(Debug)]
pub struct ContainerReader {
    body: Vec<u8>,
    pos: usize,
    kind: &'static str,
    stored_crc: u32,
}

impl ContainerReader {
    pub fn open(path: &Path, magic: &'static [u8; 8], kind: &'static str) -> Result<Self> {
        let raw = fs::read(path)?;
        Self::from_bytes(raw, magic, kind)
    }

    pub fn from_bytes(raw: Vec<u8>, magic: &'static [u8; 8], kind: &'static str) -> Result<Self> {
        if raw.len() < 8 || raw[..7] != magic[..7] {
            return Err(Error::BadMagic { expected: kind });
        }
        if raw[7] != magic[7] {
            return Err(Error::VersionMismatch {
                kind,
                found: raw[7] as char,
                supported: magic[7] as char,
            });
        }
        if raw.len() < 12 {
            return Err(Error::Truncated {
                what: format!("{kind} checksum"),
            });
        }
        let crc_at = raw.len() - 4;
        let stored_crc = u32::from_le_bytes(raw[crc_at..].try_into().unwrap());
        Ok(ContainerReader {
            body: raw[8..crc_at].to_vec(),
            pos: 0,
            kind,
            stored_crc,
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.body.len() {
            return Err(Error::Truncated {
                what: format!("{} {what}", self.kind),
            });
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn block(&mut self, what: &str) -> Result<Vec<u8>> {
        let len = self.u32(what)? as usize;
        Ok(self.take(len, what)?.to_vec())
    }

    pub fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let rank = self.u32(what)? as usize;
        if rank > crate::tensor::MAX_RANK {
            return Err(Error::MalformedMetadata(format!(
                "{what}: rank {rank} out of range"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32(what)? as usize);
        }
        let numel: usize = dims.iter().product();
        let data = self.f64_vec(numel, what)?;
        Tensor::new(dims, data)
    }

    /// Verify full consumption and the checksum.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(Error::TrailingBytes { what: self.kind });
        }
        let computed = crc32fast::hash(&self.body);
        if computed != self.stored_crc {
            return Err(Error::ChecksumMismatch {
                stored: self.stored_crc,
                computed,
            });
        }
        Ok(())
    }
}

/// Render a metadata document: one `key: value` line per entry.
pub fn metadata_doc(entries: &[(&str, String)]) -> Vec<u8> {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push_str(": ");
        s.push_str(v);
        s.push('\n');
    }
    s.into_bytes()
}

/// Parse a metadata document back into ordered key/value pairs.
pub fn parse_metadata(bytes: &[u8]) -> Result<Vec<(String, String)>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::MalformedMetadata("not valid UTF-8".into()))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once(':') else {
            return Err(Error::MalformedMetadata(format!("line without ':': {line:?}")));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Look up a required metadata key.
pub fn meta_get<'a>(meta: &'a [(String, String)], key: &str) -> Result<&'a str> {
    meta.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::MalformedMetadata(format!("missing key {key:?}")))
}

pub fn meta_parse<T: std::str::FromStr>(meta: &[(String, String)], key: &str) -> Result<T> {
    meta_get(meta, key)?
        .parse()
        .map_err(|_| Error::MalformedMetadata(format!("unparseable value for key {key:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"UAPTEST1";

    #[test]
    fn round_trip_and_crc() {
        let mut w = ContainerWriter::new(MAGIC);
        w.u32(7);
        w.f64(1.5);
        w.block(b"hello");
        let bytes = w.into_bytes();

        let mut r = ContainerReader::from_bytes(bytes.clone(), MAGIC, "test").unwrap();
        assert_eq!(r.u32("x").unwrap(), 7);
        assert_eq!(r.f64_vec(1, "y").unwrap(), vec![1.5]);
        assert_eq!(r.block("z").unwrap(), b"hello");
        r.finish().unwrap();

        // flip one payload byte → checksum mismatch
        let mut bad = bytes.clone();
        bad[9] ^= 0xff;
        let mut r = ContainerReader::from_bytes(bad, MAGIC, "test").unwrap();
        let _ = r.u32("x").unwrap();
        let _ = r.f64_vec(1, "y").unwrap();
        let _ = r.block("z").unwrap();
        assert!(matches!(r.finish(), Err(Error::ChecksumMismatch { .. })));

        // cut the file mid-payload → truncated
        let mut r =
            ContainerReader::from_bytes(bytes[..bytes.len() - 8].to_vec(), MAGIC, "test").unwrap();
        let _ = r.u32("x").unwrap();
        let _ = r.f64_vec(1, "y").unwrap();
        assert!(matches!(r.block("z"), Err(Error::Truncated { .. })));
    }

    #[test]
    fn magic_and_version_are_distinct_errors() {
        let err = ContainerReader::from_bytes(b"NOTAFILE....".to_vec(), MAGIC, "test").unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        let err = ContainerReader::from_bytes(b"UAPTEST2....".to_vec(), MAGIC, "test").unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: '2', .. }));
    }

    #[test]
    fn metadata_doc_round_trip() {
        let doc = metadata_doc(&[("arch", "convnet".into()), ("seed", "42".into())]);
        let meta = parse_metadata(&doc).unwrap();
        assert_eq!(meta_get(&meta, "arch").unwrap(), "convnet");
        assert_eq!(meta_parse::<u64>(&meta, "seed").unwrap(), 42);
        assert!(meta_get(&meta, "absent").is_err());
    }
}
