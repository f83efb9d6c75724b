//! Shared binary container: `NSEL` magic, little-endian `u32` version, a
//! `u32`-length-prefixed JSON descriptor, then a raw payload whose layout the
//! descriptor determines.

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"NSEL";
pub const FORMAT_VERSION: u32 = 1;
/// Descriptors larger than this are rejected before allocation.
const MAX_DESCRIPTOR: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes (not an NSEL container)")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid descriptor: {0}")]
    Descriptor(String),
    #[error("corrupt payload: {0}")]
    Corrupt(String),
    #[error("{extra} trailing bytes after offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
}

pub fn write_container(descriptor: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + descriptor.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor);
    out.extend_from_slice(payload);
    out
}

/// Splits a container into its descriptor and payload reader.
pub fn read_container(bytes: &[u8]) -> Result<(&[u8], Reader<'_>), FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let len = r.u32()? as usize;
    if len > MAX_DESCRIPTOR {
        return Err(FormatError::Descriptor(format!(
            "descriptor length {len} too large"
        )));
    }
    let descriptor = r.take(len)?;
    Ok((descriptor, r))
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        match self.remaining() {
            0 => Ok(()),
            extra => Err(FormatError::TrailingBytes {
                offset: self.pos,
                extra,
            }),
        }
    }
}
