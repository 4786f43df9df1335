//! `MOPQEMB1` embedding files: u32 dim, u64 count, then per record a
//! u32-length-prefixed UTF-8 id and `dim` f32 values.

use std::collections::HashMap;
use std::path::Path;

use super::{put_string, read_file, write_file, FormatError, Reader};
use crate::Error;

const MAGIC: &[u8; 8] = b"MOPQEMB1";

/// Vectors with unique string ids, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    /// Appends a vector; ids must be unique and values finite.
    pub fn push(&mut self, id: impl Into<String>, vector: &[f64]) -> Result<(), String> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(format!("vector '{id}' has length {}, expected {}", vector.len(), self.dim));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(format!("vector '{id}' has non-finite values"));
        }
        if self.index.contains_key(&id) {
            return Err(format!("duplicate id '{id}'"));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major `len×dim` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids.iter().map(String::as_str).zip(self.data.chunks_exact(self.dim.max(1)))
    }
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + set.len() * (8 + 4 * set.dim()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for (id, row) in set.iter() {
        put_string(&mut out, id);
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_embeddings(bytes: &[u8], what: &str) -> Result<EmbeddingSet, FormatError> {
    let mut r = Reader::new(bytes, what);
    r.magic(MAGIC)?;
    let dim = r.u32("dim")? as usize;
    let count = r.u64("count")?;
    let mut set = EmbeddingSet::new(dim);
    let mut row = vec![0.0; dim];
    for k in 0..count {
        let start = r.position();
        if r.remaining() < 4 {
            return Err(r.error(
                start,
                format!(
                    "declared {count} records but payload ends after {k}: expected at least {} more bytes, found {}",
                    (count - k) * (4 + 4 * dim as u64),
                    r.remaining()
                ),
            ));
        }
        let id = r.string("record id")?;
        for v in row.iter_mut() {
            *v = r.f32("vector value")? as f64;
        }
        set.push(id, &row).map_err(|e| r.error(start, e))?;
    }
    r.finish()?;
    Ok(set)
}

pub fn save_embeddings(path: &Path, set: &EmbeddingSet) -> Result<(), Error> {
    write_file(path, &encode_embeddings(set))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet, Error> {
    Ok(decode_embeddings(&read_file(path)?, &path.display().to_string())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, dim: usize) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set = EmbeddingSet::new(dim);
        for i in 0..n {
            let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0f32..2.0) as f64).collect();
            set.push(format!("id-{i}"), &row).unwrap();
        }
        set
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let set = sample(100, 7);
        let back = decode_embeddings(&encode_embeddings(&set), "mem").unwrap();
        assert_eq!(back, set);
        assert!(back.data().iter().zip(set.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn empty_file_is_format_error() {
        let err = decode_embeddings(&[], "mem").unwrap_err();
        assert_eq!(err.offset, 0);
        assert!(err.detail.contains("empty"));
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = encode_embeddings(&sample(1, 2));
        bytes[0] = b'X';
        assert!(decode_embeddings(&bytes, "mem").unwrap_err().detail.contains("magic"));
    }

    #[test]
    fn count_mismatch_names_bytes() {
        let mut bytes = encode_embeddings(&sample(3, 2));
        bytes[12..20].copy_from_slice(&5u64.to_le_bytes());
        let err = decode_embeddings(&bytes, "mem").unwrap_err();
        assert!(err.detail.contains("expected") && err.detail.contains("found"), "{err}");

        let mut bytes = encode_embeddings(&sample(3, 2));
        bytes[12..20].copy_from_slice(&2u64.to_le_bytes());
        let err = decode_embeddings(&bytes, "mem").unwrap_err();
        assert!(err.detail.contains("bytes"), "{err}");
    }

    #[test]
    fn truncated_record_reports_offset() {
        let bytes = encode_embeddings(&sample(2, 3));
        let err = decode_embeddings(&bytes[..bytes.len() - 2], "mem").unwrap_err();
        assert!(err.offset > 20);
        assert!(err.detail.contains("truncated"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut set = EmbeddingSet::new(1);
        set.push("a", &[1.0]).unwrap();
        assert!(set.push("a", &[2.0]).is_err());
        assert!(set.push("b", &[f64::NAN]).is_err());
        assert!(set.push("c", &[1.0, 2.0]).is_err());
        assert_eq!(set.get("a"), Some(&[1.0][..]));
    }
}
