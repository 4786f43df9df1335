//! Quantized key index, exhaustive ADC search, the exact-search oracle and
//! Recall@N evaluation.
//!
//! Index entries are sorted by key id when the index is built, so the tie
//! rule "equal scores rank the lower key id first" is simply "lower
//! position first".

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::grad::{ParameterSet, Tensor};
use crate::io::{read_file, write_file, EmbeddingSet, FormatError, Reader};
use crate::model::ModelConfig;
use crate::quantizer::{CodeAssignment, CodebookSet, DistanceTable, QuantError, SelectionVariant};
use crate::Error;

const MAGIC: &[u8; 8] = b"MOPQIDX1";

/// Recall cut-offs reported by default.
pub const DEFAULT_NS: [usize; 4] = [1, 10, 50, 100];

/// PQ codes of a key corpus with their codebooks.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedIndex {
    books: CodebookSet,
    /// Row-major `len×M`.
    codes: Vec<u16>,
    key_ids: Vec<String>,
}

impl QuantizedIndex {
    /// Index over `(key_id, codes)` entries, re-ordered by key id.
    pub fn new(books: CodebookSet, entries: Vec<(String, CodeAssignment)>) -> Result<Self, Error> {
        if entries.is_empty() {
            return Err(QuantError::Empty("index over no keys").into());
        }
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Config(format!("duplicate key id '{}'", w[0].0)));
        }
        let mut codes = Vec::with_capacity(entries.len() * books.m());
        let mut key_ids = Vec::with_capacity(entries.len());
        for (id, c) in entries {
            let c = CodeAssignment::new(c.codes().to_vec(), &books)?;
            codes.extend_from_slice(c.codes());
            key_ids.push(id);
        }
        Ok(Self { books, codes, key_ids })
    }

    /// Assigns codes to already-encoded key embeddings.
    pub fn from_embeddings(
        books: CodebookSet,
        variant: &SelectionVariant,
        keys: &EmbeddingSet,
    ) -> Result<Self, Error> {
        let entries = (0..keys.len())
            .into_par_iter()
            .map(|i| Ok((keys.id(i).to_string(), books.assign(keys.row(i), variant)?)))
            .collect::<Result<Vec<_>, QuantError>>()?;
        Self::new(books, entries)
    }

    pub fn books(&self) -> &CodebookSet {
        &self.books
    }

    pub fn len(&self) -> usize {
        self.key_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_ids.is_empty()
    }

    pub fn key_id(&self, i: usize) -> &str {
        &self.key_ids[i]
    }

    pub fn key_ids(&self) -> &[String] {
        &self.key_ids
    }

    pub fn position(&self, key_id: &str) -> Option<usize> {
        self.key_ids.binary_search_by(|k| k.as_str().cmp(key_id)).ok()
    }

    pub fn codes(&self, i: usize) -> &[u16] {
        let m = self.books.m();
        &self.codes[i * m..(i + 1) * m]
    }

    pub fn reconstruct(&self, i: usize) -> Vec<f64> {
        let codes = CodeAssignment::new(self.codes(i).to_vec(), &self.books).expect("validated at build");
        self.books.reconstruct(&codes)
    }

    /// ADC scores of every key, in index order.
    pub fn scores(&self, table: &DistanceTable) -> Vec<f64> {
        self.codes.chunks_exact(self.books.m()).map(|c| table.score_raw(c)).collect()
    }
}

/// Rounds codewords to f32 so the index file stores them exactly.
fn f32_books(books: &CodebookSet) -> Result<CodebookSet, QuantError> {
    let words = books.codewords().iter().map(|&v| v as f32 as f64).collect();
    CodebookSet::new(books.m(), books.l(), books.d(), words)
}

/// Encodes `keys` with the model and quantizes them with its codebooks
/// (rounded to f32 precision, as stored in index files).
pub fn build_index(model: &ModelConfig, params: &ParameterSet, keys: &EmbeddingSet) -> Result<QuantizedIndex, Error> {
    let encoded = encode_set(model, params, keys)?;
    let books = f32_books(&model.codebooks(params)?)?;
    QuantizedIndex::from_embeddings(books, &model.variant(params)?, &encoded)
}

/// Runs the encoder over every row of `set`, keeping ids.
pub fn encode_set(model: &ModelConfig, params: &ParameterSet, set: &EmbeddingSet) -> Result<EmbeddingSet, Error> {
    if set.is_empty() {
        return Err(QuantError::Empty("encoding an empty embedding set").into());
    }
    const CHUNK: usize = 512;
    let dim = set.dim();
    let blocks = set
        .data()
        .par_chunks(CHUNK * dim)
        .map(|rows| model.encoder.encode_rows(&Tensor::new(rows.len() / dim, dim, rows.to_vec())?, params))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = EmbeddingSet::new(model.d());
    let mut i = 0;
    for block in blocks {
        for r in 0..block.rows() {
            out.push(set.id(i), block.row_slice(r)).map_err(Error::Config)?;
            i += 1;
        }
    }
    Ok(out)
}

/// One ranked result.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub key_id: String,
    pub score: f64,
}

/// Descending score, then ascending position.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

fn top_positions(scores: &[f64], top_n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let n = top_n.min(order.len());
    if n < order.len() {
        order.select_nth_unstable_by(n, |&a, &b| rank_order(scores, a, b));
        order.truncate(n);
    }
    order.sort_by(|&a, &b| rank_order(scores, a, b));
    order
}

fn check_top_n(top_n: usize) -> Result<(), Error> {
    if top_n == 0 {
        return Err(Error::Config("top_n must be at least 1".into()));
    }
    Ok(())
}

/// Top `top_n` keys by ADC score for an encoded query.
pub fn search(index: &QuantizedIndex, query: &[f64], top_n: usize) -> Result<Vec<Hit>, Error> {
    check_top_n(top_n)?;
    let scores = index.scores(&index.books.distance_table(query)?);
    Ok(top_positions(&scores, top_n)
        .into_iter()
        .map(|i| Hit {
            key_id: index.key_id(i).to_string(),
            score: scores[i],
        })
        .collect())
}

/// Brute-force inner-product ranking over non-quantized key vectors.
pub fn exact_search(keys: &EmbeddingSet, query: &[f64], top_n: usize) -> Result<Vec<Hit>, Error> {
    check_top_n(top_n)?;
    if query.len() != keys.dim() {
        return Err(QuantError::LengthMismatch {
            expected: keys.dim(),
            actual: query.len(),
        }
        .into());
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys.id(a).cmp(keys.id(b)));
    let scores: Vec<f64> = order
        .iter()
        .map(|&i| keys.row(i).iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    Ok(top_positions(&scores, top_n)
        .into_iter()
        .map(|p| Hit {
            key_id: keys.id(order[p]).to_string(),
            score: scores[p],
        })
        .collect())
}

/// Recall at each cut-off over a set of queries.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub recall_at: BTreeMap<usize, f64>,
    pub query_count: usize,
}

impl EvalResult {
    pub fn recall(&self, n: usize) -> Option<f64> {
        self.recall_at.get(&n).copied()
    }

    fn from_ranks(ranks: &[Option<usize>], ns: &[usize]) -> Self {
        let count = ranks.len();
        let recall_at = ns
            .iter()
            .map(|&n| {
                let hits = ranks.iter().filter(|r| matches!(r, Some(r) if *r < n)).count();
                (n, if count == 0 { 0.0 } else { hits as f64 / count as f64 })
            })
            .collect();
        Self {
            recall_at,
            query_count: count,
        }
    }
}

/// Fraction of queries whose ground-truth id appears in the first `n`
/// entries of its result list, for every `n` in `ns`.
pub fn recall_at_n<S: AsRef<str>>(results: &[Vec<S>], truths: &[S], ns: &[usize]) -> Result<EvalResult, Error> {
    if results.len() != truths.len() {
        return Err(Error::Config(format!(
            "{} result lists for {} ground truths",
            results.len(),
            truths.len()
        )));
    }
    let ranks: Vec<Option<usize>> = results
        .iter()
        .zip(truths)
        .map(|(list, t)| list.iter().position(|id| id.as_ref() == t.as_ref()))
        .collect();
    Ok(EvalResult::from_ranks(&ranks, ns))
}

/// Rank of position `truth` under the search order, without sorting.
fn rank_of(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < truth))
        .count()
}

/// Recall@N of ADC search for encoded `queries` whose ground-truth key ids
/// are `truths`. Equivalent to running [`search`] with the largest cut-off
/// and [`recall_at_n`], but counts ranks directly.
pub fn evaluate<S: AsRef<str> + Sync>(
    index: &QuantizedIndex,
    queries: &[Vec<f64>],
    truths: &[S],
    ns: &[usize],
) -> Result<EvalResult, Error> {
    if queries.len() != truths.len() {
        return Err(Error::Config("one ground truth per query required".into()));
    }
    let ranks = queries
        .par_iter()
        .zip(truths)
        .map(|(q, t)| {
            let truth = index
                .position(t.as_ref())
                .ok_or_else(|| Error::Config(format!("ground truth '{}' not in index", t.as_ref())))?;
            let scores = index.scores(&index.books.distance_table(q)?);
            Ok(Some(rank_of(&scores, truth)))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(EvalResult::from_ranks(&ranks, ns))
}

/// Recall@N of exact inner-product search over non-quantized keys.
pub fn evaluate_exact<S: AsRef<str> + Sync>(
    keys: &EmbeddingSet,
    queries: &[Vec<f64>],
    truths: &[S],
    ns: &[usize],
) -> Result<EvalResult, Error> {
    if queries.len() != truths.len() {
        return Err(Error::Config("one ground truth per query required".into()));
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys.id(a).cmp(keys.id(b)));
    let ranks = queries
        .par_iter()
        .zip(truths)
        .map(|(q, t)| {
            let truth = order
                .binary_search_by(|&i| keys.id(i).cmp(t.as_ref()))
                .map_err(|_| Error::Config(format!("ground truth '{}' not in key set", t.as_ref())))?;
            let scores: Vec<f64> = order
                .iter()
                .map(|&i| keys.row(i).iter().zip(q).map(|(a, b)| a * b).sum())
                .collect();
            Ok(Some(rank_of(&scores, truth)))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(EvalResult::from_ranks(&ranks, ns))
}

pub fn encode_index(index: &QuantizedIndex) -> Vec<u8> {
    let b = &index.books;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(b.m() as u32).to_le_bytes());
    out.extend_from_slice(&(b.l() as u32).to_le_bytes());
    out.extend_from_slice(&(b.d() as u32).to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    for &v in b.codewords() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &c in &index.codes {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for id in &index.key_ids {
        crate::io::put_string(&mut out, id);
    }
    out
}

pub fn decode_index(bytes: &[u8], what: &str) -> Result<QuantizedIndex, FormatError> {
    let mut r = Reader::new(bytes, what);
    r.magic(MAGIC)?;
    let m = r.u32("M")? as usize;
    let l = r.u32("L")? as usize;
    let d = r.u32("d")? as usize;
    let count = r.u64("key_count")? as usize;
    let geometry_at = r.position();
    let need = (l * d) as u64 * 4 + count as u64 * m as u64 * 2;
    if (r.remaining() as u64) < need {
        return Err(r.error(
            geometry_at,
            format!(
                "declared geometry needs {need} bytes of codewords and codes, found {}",
                r.remaining()
            ),
        ));
    }
    let mut words = Vec::with_capacity(l * d);
    for _ in 0..l * d {
        words.push(r.f32("codeword value")? as f64);
    }
    let books = CodebookSet::new(m, l, d, words).map_err(|e| r.error(geometry_at, e.to_string()))?;
    let mut codes = Vec::with_capacity(count * m);
    for _ in 0..count * m {
        let at = r.position();
        let c = r.u16("code")?;
        if c as usize >= l {
            return Err(r.error(at, format!("code {c} out of range for L={l}")));
        }
        codes.push(c);
    }
    let mut key_ids = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.position();
        let id = r.string("key id")?;
        if key_ids.last().is_some_and(|prev: &String| prev.as_str() >= id.as_str()) {
            return Err(r.error(at, "key ids must be strictly increasing"));
        }
        key_ids.push(id);
    }
    r.finish()?;
    if count == 0 {
        return Err(r.error(geometry_at, "index has no keys"));
    }
    Ok(QuantizedIndex { books, codes, key_ids })
}

pub fn save_index(path: &Path, index: &QuantizedIndex) -> Result<(), Error> {
    write_file(path, &encode_index(index))
}

pub fn load_index(path: &Path) -> Result<QuantizedIndex, Error> {
    Ok(decode_index(&read_file(path)?, &path.display().to_string())?)
}
