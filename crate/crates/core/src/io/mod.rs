//! File formats, datasets, synthetic data, text featurization and run
//! configuration.
//!
//! All binary formats are little-endian and start with an 8-byte magic.
//! Decoding errors report the byte offset where parsing failed.

mod checkpoint;
mod config;
mod dataset;
mod embeddings;
mod featurize;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{RunConfig, CONFIG_KEYS};
pub use dataset::{gen_synthetic, load_dataset, save_dataset, Pair, PairedDataset, Split, SyntheticSpec};
pub use embeddings::{decode_embeddings, encode_embeddings, load_embeddings, save_embeddings, EmbeddingSet};
pub use featurize::{fnv1a64, hash_featurize};

use std::path::Path;

use thiserror::Error as ThisError;

use crate::Error;

/// Malformed file contents.
#[derive(Debug, ThisError, Clone, PartialEq)]
#[error("{what}: at byte {offset}: {detail}")]
pub struct FormatError {
    /// File kind or path.
    pub what: String,
    pub offset: u64,
    pub detail: String,
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, Error> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Cursor over a byte buffer that reports offsets in its errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: impl Into<String>) -> Self {
        Self {
            bytes,
            pos: 0,
            what: what.into(),
        }
    }

    pub(crate) fn error(&self, offset: usize, detail: impl Into<String>) -> FormatError {
        FormatError {
            what: self.what.clone(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(self.error(
                self.pos,
                format!("truncated {field}: expected {n} bytes, found {}", self.remaining()),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<(), FormatError> {
        if self.bytes.is_empty() {
            return Err(self.error(0, "empty file"));
        }
        let found = self.take(8, "magic")?;
        if found != expected {
            return Err(self.error(
                0,
                format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(found)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn u16(&mut self, field: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, field: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self, field: &str) -> Result<f32, FormatError> {
        let at = self.pos;
        let v = f32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(self.error(at, format!("non-finite {field}")));
        }
        Ok(v)
    }

    pub(crate) fn f64(&mut self, field: &str) -> Result<f64, FormatError> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(self.error(at, format!("non-finite {field}")));
        }
        Ok(v)
    }

    /// u32 length followed by UTF-8 bytes.
    pub(crate) fn string(&mut self, field: &str) -> Result<String, FormatError> {
        let len = self.u32(field)? as usize;
        let at = self.pos;
        let raw = self.take(len, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error(at, format!("{field} is not valid UTF-8")))
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        if self.remaining() > 0 {
            return Err(self.error(
                self.pos,
                format!(
                    "declared contents end at byte {}, but the file has {} bytes",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        Ok(())
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}
