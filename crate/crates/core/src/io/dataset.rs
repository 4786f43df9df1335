//! Paired query/key datasets and the synthetic clustered generator.
//!
//! On disk a dataset is a directory with `queries.mopqemb`,
//! `keys.mopqemb` and `pairs.tsv` (`query_id<TAB>key_id<TAB>split` lines).

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::embeddings::{load_embeddings, save_embeddings, EmbeddingSet};
use super::{read_file, write_file, FormatError};
use crate::Error;

pub const QUERIES_FILE: &str = "queries.mopqemb";
pub const KEYS_FILE: &str = "keys.mopqemb";
pub const PAIRS_FILE: &str = "pairs.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            _ => Err(format!("unknown split '{s}'")),
        }
    }
}

/// A query and its single ground-truth key, by row position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub query: usize,
    pub key: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub queries: EmbeddingSet,
    pub keys: EmbeddingSet,
    pub pairs: Vec<Pair>,
}

impl PairedDataset {
    /// Checks references, dimensions and one pair per query.
    pub fn validate(&self) -> Result<(), String> {
        if self.queries.dim() != self.keys.dim() {
            return Err(format!(
                "query dim {} differs from key dim {}",
                self.queries.dim(),
                self.keys.dim()
            ));
        }
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if p.query >= self.queries.len() || p.key >= self.keys.len() {
                return Err(format!("pair ({}, {}) references a missing row", p.query, p.key));
            }
            if !seen.insert(p.query) {
                return Err(format!("query '{}' has more than one pair", self.queries.id(p.query)));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.queries.dim()
    }

    /// Pairs in `split`, in file order.
    pub fn split(&self, split: Split) -> Vec<Pair> {
        self.pairs.iter().copied().filter(|p| p.split == split).collect()
    }
}

/// Parameters of [`gen_synthetic`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_pairs: usize,
    pub input_dim: usize,
    pub cluster_count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Clustered pairs: `cluster_count` unit-Gaussian centers; pair `i` belongs
/// to cluster `i mod cluster_count`, and its key and query are the center
/// plus independent `N(0, σ²)` noise. Values are rounded to f32 so the
/// dataset round-trips through files exactly. Splits are 80/10/10 after a
/// seeded shuffle.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<PairedDataset, Error> {
    let SyntheticSpec {
        n_pairs,
        input_dim,
        cluster_count,
        noise_sigma,
        seed,
    } = *spec;
    if n_pairs == 0 || input_dim == 0 || cluster_count == 0 {
        return Err(Error::Config("n_pairs, input_dim and cluster_count must be positive".into()));
    }
    if cluster_count > n_pairs {
        return Err(Error::Config(format!("cluster_count {cluster_count} exceeds n_pairs {n_pairs}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise_sigma {noise_sigma} must be finite and ≥ 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let centers: Vec<f64> = (0..cluster_count * input_dim).map(|_| gauss()).collect();
    let width = (n_pairs - 1).to_string().len().max(6);
    let mut queries = EmbeddingSet::new(input_dim);
    let mut keys = EmbeddingSet::new(input_dim);
    let mut row = vec![0.0; input_dim];
    for i in 0..n_pairs {
        let c = &centers[(i % cluster_count) * input_dim..][..input_dim];
        for (set, prefix) in [(&mut keys, 'k'), (&mut queries, 'q')] {
            for (v, &cv) in row.iter_mut().zip(c) {
                *v = (cv + noise_sigma * gauss()) as f32 as f64;
            }
            set.push(format!("{prefix}{i:0width$}"), &row).map_err(Error::Config)?;
        }
    }
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut rng);
    let n_train = n_pairs * 8 / 10;
    let n_valid = n_pairs / 10;
    let mut splits = vec![Split::Test; n_pairs];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    let pairs = (0..n_pairs)
        .map(|i| Pair {
            query: i,
            key: i,
            split: splits[i],
        })
        .collect();
    Ok(PairedDataset { queries, keys, pairs })
}

pub fn save_dataset(dir: &Path, data: &PairedDataset) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    save_embeddings(&dir.join(QUERIES_FILE), &data.queries)?;
    save_embeddings(&dir.join(KEYS_FILE), &data.keys)?;
    let mut tsv = String::new();
    for p in &data.pairs {
        tsv.push_str(&format!("{}\t{}\t{}\n", data.queries.id(p.query), data.keys.id(p.key), p.split));
    }
    write_file(&dir.join(PAIRS_FILE), tsv.as_bytes())
}

fn parse_pairs(text: &str, queries: &EmbeddingSet, keys: &EmbeddingSet, what: &str) -> Result<Vec<Pair>, FormatError> {
    let mut pairs = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.is_empty() {
            continue;
        }
        let err = |detail: String| FormatError {
            what: what.to_string(),
            offset: at,
            detail,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let query = queries
            .position(fields[0])
            .ok_or_else(|| err(format!("unknown query id '{}'", fields[0])))?;
        let key = keys
            .position(fields[1])
            .ok_or_else(|| err(format!("unknown key id '{}'", fields[1])))?;
        let split = fields[2].parse().map_err(err)?;
        pairs.push(Pair { query, key, split });
    }
    Ok(pairs)
}

pub fn load_dataset(dir: &Path) -> Result<PairedDataset, Error> {
    let queries = load_embeddings(&dir.join(QUERIES_FILE))?;
    let keys = load_embeddings(&dir.join(KEYS_FILE))?;
    let path = dir.join(PAIRS_FILE);
    let what = path.display().to_string();
    let bytes = read_file(&path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| FormatError {
        what: what.clone(),
        offset: e.valid_up_to() as u64,
        detail: "invalid UTF-8".into(),
    })?;
    let pairs = parse_pairs(text, &queries, &keys, &what)?;
    let data = PairedDataset { queries, keys, pairs };
    data.validate().map_err(|detail| FormatError {
        what,
        offset: 0,
        detail,
    })?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_pairs: 50,
            input_dim: 4,
            cluster_count: 5,
            noise_sigma: sigma,
            seed: 3,
        }
    }

    #[test]
    fn noiseless_queries_equal_keys() {
        let data = gen_synthetic(&spec(0.0)).unwrap();
        for p in &data.pairs {
            assert_eq!(data.queries.row(p.query), data.keys.row(p.key));
        }
    }

    #[test]
    fn deterministic_and_split_sizes() {
        let a = gen_synthetic(&spec(0.1)).unwrap();
        assert_eq!(a, gen_synthetic(&spec(0.1)).unwrap());
        assert_ne!(a, gen_synthetic(&SyntheticSpec { seed: 4, ..spec(0.1) }).unwrap());
        assert_eq!(a.split(Split::Train).len(), 40);
        assert_eq!(a.split(Split::Valid).len(), 5);
        assert_eq!(a.split(Split::Test).len(), 5);
        assert_eq!(a.queries.id(7), "q000007");
        a.validate().unwrap();
    }

    #[test]
    fn rejects_more_clusters_than_pairs() {
        assert!(gen_synthetic(&SyntheticSpec { cluster_count: 51, ..spec(0.1) }).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_synthetic(&spec(0.2)).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn bad_pairs_line_reports_offset() {
        let data = gen_synthetic(&spec(0.2)).unwrap();
        let text = "q000000\tk000000\ttrain\nq000001\tk000001\n";
        let err = parse_pairs(text, &data.queries, &data.keys, "pairs").unwrap_err();
        assert_eq!(err.offset, 22);
        let err = parse_pairs("q000000\tk999\ttrain\n", &data.queries, &data.keys, "pairs").unwrap_err();
        assert!(err.detail.contains("k999"));
    }
}
