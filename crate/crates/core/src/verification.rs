//! Runnable constructions behind two properties of PQ codebooks:
//!
//! * a common shift of all codewords in a codebook, smaller than a
//!   computable radius, leaves every code assignment and every query
//!   ranking unchanged while it can increase the reconstruction loss, so
//!   reconstruction loss is not a monotone proxy for retrieval quality;
//! * reconstruction loss is positive whenever the codebooks are too small
//!   to cover the keys, and adding codewords drives it to zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::objectives::reconstruction_loss;
use crate::quantizer::{CodebookSet, QuantError, SelectionVariant};
use crate::retrieval::{search, QuantizedIndex};
use crate::io::EmbeddingSet;
use crate::trainer::fit_kmeans_pq;
use crate::Error;

/// Fraction of the radius actually used, to stay strictly inside it.
pub const RADIUS_FRACTION: f64 = 0.9;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_keys<K: AsRef<[f64]>>(books: &CodebookSet, keys: &[K]) -> Result<(), Error> {
    if keys.is_empty() {
        return Err(QuantError::Empty("no keys").into());
    }
    if let Some(k) = keys.iter().find(|k| k.as_ref().len() != books.d()) {
        return Err(QuantError::LengthMismatch {
            expected: books.d(),
            actual: k.as_ref().len(),
        }
        .into());
    }
    Ok(())
}

/// Per codebook, half the smallest gap (over `keys`) between the distance
/// to the nearest and to the second-nearest codeword. A common shift of
/// norm below this value cannot change any of these keys' assignments.
pub fn perturbation_radius<K: AsRef<[f64]>>(books: &CodebookSet, keys: &[K]) -> Result<Vec<f64>, Error> {
    check_keys(books, keys)?;
    if books.l() < 2 {
        return Err(Error::Precondition("the radius needs at least two codewords per codebook".into()));
    }
    let s = books.sub_dim();
    Ok((0..books.m())
        .map(|i| {
            let gap = keys
                .iter()
                .map(|k| {
                    let sub = &k.as_ref()[i * s..(i + 1) * s];
                    let (mut first, mut second) = (f64::INFINITY, f64::INFINITY);
                    for j in 0..books.l() {
                        let d = dist(sub, books.codeword(i, j));
                        if d < first {
                            second = first;
                            first = d;
                        } else if d < second {
                            second = d;
                        }
                    }
                    second - first
                })
                .fold(f64::INFINITY, f64::min);
            0.5 * gap
        })
        .collect())
}

/// Per-codebook shifts `ε_i = magnitude_i · u_i` with unit `u_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub unit_directions: Vec<Vec<f64>>,
    pub magnitudes: Vec<f64>,
}

impl PerturbationSpec {
    pub fn zero(books: &CodebookSet) -> Self {
        let mut e = vec![0.0; books.sub_dim()];
        e[0] = 1.0;
        Self {
            unit_directions: vec![e; books.m()],
            magnitudes: vec![0.0; books.m()],
        }
    }

    pub fn epsilon(&self, i: usize) -> Vec<f64> {
        self.unit_directions[i].iter().map(|u| u * self.magnitudes[i]).collect()
    }
}

/// Shifts every codeword of codebook `i` by `ε_i`, after checking that each
/// nonzero magnitude lies strictly below its radius.
pub fn apply_invariant_perturbation(
    books: &CodebookSet,
    spec: &PerturbationSpec,
    radii: &[f64],
) -> Result<CodebookSet, Error> {
    let s = books.sub_dim();
    if spec.unit_directions.len() != books.m() || spec.magnitudes.len() != books.m() || radii.len() != books.m() {
        return Err(Error::Precondition(format!("perturbation must cover all {} codebooks", books.m())));
    }
    for i in 0..books.m() {
        let u = &spec.unit_directions[i];
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if u.len() != s || (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("direction {i} is not a unit vector of length {s}")));
        }
        let r = spec.magnitudes[i];
        if !(r >= 0.0) || (r > 0.0 && r >= radii[i]) {
            return Err(Error::Precondition(format!(
                "magnitude {r} for codebook {i} is not strictly below its radius {}",
                radii[i]
            )));
        }
    }
    let mut out = books.clone();
    for i in 0..books.m() {
        let eps = spec.epsilon(i);
        for word in out.codebook_mut(i).chunks_exact_mut(s) {
            for (w, e) in word.iter_mut().zip(&eps) {
                *w += e;
            }
        }
    }
    Ok(out)
}

/// Outcome of one perturbation experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct LemmaReport {
    /// Every key keeps its codes (checked only for the sampled keys).
    pub assignments_unchanged: bool,
    pub recon_before: f64,
    pub recon_after: f64,
    /// Every query's full ADC ranking is identical.
    pub rankings_identical: bool,
    pub keys_checked: usize,
    pub queries_checked: usize,
    pub radii: Vec<f64>,
    pub magnitudes: Vec<f64>,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.assignments_unchanged && self.rankings_identical && self.recon_after > self.recon_before
    }
}

fn index_of<K: AsRef<[f64]>>(books: &CodebookSet, keys: &[K]) -> Result<QuantizedIndex, Error> {
    let mut set = EmbeddingSet::new(books.d());
    for (i, k) in keys.iter().enumerate() {
        set.push(format!("{i:06}"), k.as_ref()).map_err(Error::Config)?;
    }
    QuantizedIndex::from_embeddings(books.clone(), &SelectionVariant::L2, &set)
}

/// Applies `spec` and checks assignments, reconstruction loss and rankings.
pub fn run_perturbation<K: AsRef<[f64]>, Q: AsRef<[f64]>>(
    books: &CodebookSet,
    keys: &[K],
    queries: &[Q],
    spec: &PerturbationSpec,
) -> Result<LemmaReport, Error> {
    let radii = perturbation_radius(books, keys)?;
    let shifted = apply_invariant_perturbation(books, spec, &radii)?;
    let before = index_of(books, keys)?;
    let after = index_of(&shifted, keys)?;
    let assignments_unchanged = (0..before.len()).all(|i| before.codes(i) == after.codes(i));
    let mut rankings_identical = true;
    for q in queries {
        let a = search(&before, q.as_ref(), before.len())?;
        let b = search(&after, q.as_ref(), after.len())?;
        rankings_identical &= a.iter().map(|h| &h.key_id).eq(b.iter().map(|h| &h.key_id));
    }
    Ok(LemmaReport {
        assignments_unchanged,
        recon_before: reconstruction_loss(keys, books, &SelectionVariant::L2)?,
        recon_after: reconstruction_loss(keys, &shifted, &SelectionVariant::L2)?,
        rankings_identical,
        keys_checked: keys.len(),
        queries_checked: queries.len(),
        radii,
        magnitudes: spec.magnitudes.clone(),
    })
}

/// Random unit directions at `RADIUS_FRACTION` of each radius, each
/// oriented so that it does not point along the summed unit residuals of
/// its subspace. By convexity of the summed residual norms this guarantees
/// the reconstruction loss cannot decrease; an unoriented direction
/// decreases it to first order about half the time.
pub fn oriented_spec<K: AsRef<[f64]>>(books: &CodebookSet, keys: &[K], seed: u64) -> Result<PerturbationSpec, Error> {
    let radii = perturbation_radius(books, keys)?;
    if let Some(i) = radii.iter().position(|&r| r <= 0.0) {
        return Err(Error::Precondition(format!(
            "codebook {i} has a zero radius: some key is equidistant from two codewords"
        )));
    }
    let s = books.sub_dim();
    let mut pull = vec![vec![0.0; s]; books.m()];
    for k in keys {
        let k = k.as_ref();
        let recon = books.reconstruct(&books.assign(k, &SelectionVariant::L2)?);
        let norm = dist(k, &recon);
        if norm == 0.0 {
            continue;
        }
        for (i, p) in pull.iter_mut().enumerate() {
            for (j, v) in p.iter_mut().enumerate() {
                *v += (k[i * s + j] - recon[i * s + j]) / norm;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit_directions = Vec::with_capacity(books.m());
    for p in &pull {
        let mut u: Vec<f64> = loop {
            let u: Vec<f64> = (0..s).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break u.into_iter().map(|v| v / norm).collect();
            }
        };
        if u.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() > 0.0 {
            u.iter_mut().for_each(|v| *v = -*v);
        }
        unit_directions.push(u);
    }
    Ok(PerturbationSpec {
        unit_directions,
        magnitudes: radii.iter().map(|r| r * RADIUS_FRACTION).collect(),
    })
}

/// Builds an oriented perturbation for `books` and `keys` and reports
/// whether it leaves assignments and rankings intact while increasing the
/// reconstruction loss.
pub fn verify_lemma_and_nonmonotone<K: AsRef<[f64]>, Q: AsRef<[f64]>>(
    books: &CodebookSet,
    keys: &[K],
    queries: &[Q],
    seed: u64,
) -> Result<LemmaReport, Error> {
    let spec = oriented_spec(books, keys, seed)?;
    run_perturbation(books, keys, queries, &spec)
}

/// Gaussian codebooks, keys and queries.
#[derive(Clone, Debug)]
pub struct LemmaInstance {
    pub books: CodebookSet,
    pub keys: Vec<Vec<f64>>,
    pub queries: Vec<Vec<f64>>,
}

pub fn random_instance(d: usize, m: usize, l: usize, keys: usize, queries: usize, seed: u64) -> Result<LemmaInstance, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let books = CodebookSet::new(m, l, d, draw(l * d))?;
    let keys = (0..keys).map(|_| draw(d)).collect();
    let queries = (0..queries).map(|_| draw(d)).collect();
    Ok(LemmaInstance { books, keys, queries })
}

/// One step of the positive-loss construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconStep {
    /// Codewords per codebook at this step.
    pub l: usize,
    pub loss: f64,
    /// Key whose sub-vectors were appended to reach this step.
    pub appended_key: Option<usize>,
    /// Distortion of that key just before appending.
    pub key_distortion: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositiveReconReport {
    pub steps: Vec<ReconStep>,
}

impl PositiveReconReport {
    /// Initial loss positive, every append decreases the loss by at least
    /// the appended key's distortion, and the final loss is zero.
    pub fn passed(&self) -> bool {
        let Some(first) = self.steps.first() else { return false };
        let Some(last) = self.steps.last() else { return false };
        first.loss > 0.0
            && last.loss == 0.0
            && self.steps.windows(2).all(|w| {
                w[1].loss < w[0].loss && w[0].loss - w[1].loss >= w[1].key_distortion * (1.0 - 1e-12)
            })
    }
}

/// Fits k-means PQ with `initial_l` codewords, then repeatedly appends the
/// sub-vectors of the worst-reconstructed key as new codewords until every
/// key is reproduced exactly.
pub fn verify_positive_recon<K: AsRef<[f64]>>(
    keys: &[K],
    m: usize,
    initial_l: usize,
    seed: u64,
) -> Result<PositiveReconReport, Error> {
    let rows: Vec<&[f64]> = keys.iter().map(|k| k.as_ref()).collect();
    for (a, ka) in rows.iter().enumerate() {
        if rows[..a].iter().any(|kb| kb == ka) {
            return Err(Error::Precondition(format!("key {a} duplicates an earlier key")));
        }
    }
    let mut books = fit_kmeans_pq(&rows, m, initial_l, 100, seed)?.books;
    let variant = SelectionVariant::L2;
    let distortions = |books: &CodebookSet| -> Result<Vec<f64>, QuantError> {
        rows.iter()
            .map(|k| Ok(dist(k, &books.reconstruct(&books.assign(k, &variant)?))))
            .collect()
    };
    let mut current = distortions(&books)?;
    let mut steps = vec![ReconStep {
        l: books.l(),
        loss: current.iter().sum(),
        appended_key: None,
        key_distortion: 0.0,
    }];
    while let Some((worst, &dk)) = current
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 0.0)
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite").then(b.0.cmp(&a.0)))
    {
        let (s, l) = (books.sub_dim(), books.l());
        let mut words = Vec::with_capacity((l + 1) * books.d());
        for i in 0..m {
            words.extend_from_slice(books.codebook(i));
            words.extend_from_slice(&rows[worst][i * s..(i + 1) * s]);
        }
        books = CodebookSet::new(m, l + 1, books.d(), words)?;
        current = distortions(&books)?;
        steps.push(ReconStep {
            l: l + 1,
            loss: current.iter().sum(),
            appended_key: Some(worst),
            key_distortion: dk,
        });
        if steps.len() > rows.len() + 1 {
            return Err(Error::Verification("loss did not reach zero after covering every key".into()));
        }
    }
    Ok(PositiveReconReport { steps })
}

/// Random distinct keys for [`verify_positive_recon`].
pub fn random_keys(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_books(words: &[f64]) -> CodebookSet {
        CodebookSet::new(1, words.len(), 1, words.to_vec()).unwrap()
    }

    #[test]
    fn scalar_radius_example() {
        let r = perturbation_radius(&scalar_books(&[0.0, 1.0]), &[[0.2]]).unwrap();
        assert!((r[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn equidistant_key_gives_zero_radius() {
        let books = scalar_books(&[0.0, 1.0]);
        assert_eq!(perturbation_radius(&books, &[[0.5]]).unwrap(), vec![0.0]);
        assert!(matches!(oriented_spec(&books, &[[0.5]], 1), Err(Error::Precondition(_))));
    }

    #[test]
    fn far_codeword_leaves_radius() {
        let a = perturbation_radius(&scalar_books(&[0.0, 1.0]), &[[0.2]]).unwrap();
        let b = perturbation_radius(&scalar_books(&[0.0, 1.0, 50.0]), &[[0.2]]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scalar_shift_example() {
        let books = scalar_books(&[0.0, 1.0]);
        let spec = PerturbationSpec {
            unit_directions: vec![vec![1.0]],
            magnitudes: vec![0.25],
        };
        let shifted = apply_invariant_perturbation(&books, &spec, &[0.3]).unwrap();
        assert_eq!(shifted.codewords(), &[0.25, 1.25]);
        assert_eq!(shifted.assign(&[0.2], &SelectionVariant::L2).unwrap().codes(), &[0]);
    }

    #[test]
    fn zero_shift_changes_nothing() {
        let inst = random_instance(8, 2, 4, 50, 20, 3).unwrap();
        let spec = PerturbationSpec::zero(&inst.books);
        let radii = perturbation_radius(&inst.books, &inst.keys).unwrap();
        assert_eq!(apply_invariant_perturbation(&inst.books, &spec, &radii).unwrap(), inst.books);
        let report = run_perturbation(&inst.books, &inst.keys, &inst.queries, &spec).unwrap();
        assert_eq!(report.recon_before, report.recon_after);
        assert!(report.rankings_identical && report.assignments_unchanged);
        assert!(!report.passed());
    }

    #[test]
    fn boundary_magnitude_is_rejected() {
        let inst = random_instance(8, 2, 4, 50, 20, 4).unwrap();
        let mut spec = oriented_spec(&inst.books, &inst.keys, 1).unwrap();
        let radii = perturbation_radius(&inst.books, &inst.keys).unwrap();
        spec.magnitudes = radii.clone();
        assert!(matches!(
            apply_invariant_perturbation(&inst.books, &spec, &radii),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn random_instance_passes() {
        let inst = random_instance(8, 2, 4, 50, 20, 5).unwrap();
        let report = verify_lemma_and_nonmonotone(&inst.books, &inst.keys, &inst.queries, 5).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!((report.keys_checked, report.queries_checked), (50, 20));
    }

    #[test]
    fn radius_matches_pairwise_enumeration() {
        let inst = random_instance(6, 3, 5, 30, 0, 8).unwrap();
        let radii = perturbation_radius(&inst.books, &inst.keys).unwrap();
        let s = inst.books.sub_dim();
        for (i, &r) in radii.iter().enumerate() {
            // Independent form: sort all distances, take the first gap.
            let mut best = f64::INFINITY;
            for k in &inst.keys {
                let mut ds: Vec<f64> = (0..5).map(|j| dist(&k[i * s..(i + 1) * s], inst.books.codeword(i, j))).collect();
                ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                best = best.min(ds[1] - ds[0]);
            }
            assert_eq!(r, 0.5 * best);
        }
    }

    #[test]
    fn positive_recon_three_scalar_keys() {
        let report = verify_positive_recon(&[[0.0], [1.0], [3.0]], 1, 1, 1).unwrap();
        assert!(report.steps[0].loss > 0.0);
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.steps.last().unwrap().loss, 0.0);
    }

    #[test]
    fn keys_on_grid_have_zero_loss() {
        let report = verify_positive_recon(&[[0.0, 1.0], [2.0, 3.0]], 2, 2, 1).unwrap();
        assert_eq!(report.steps.len(), 1);
        assert_eq!(report.steps[0].loss, 0.0);
    }

    #[test]
    fn append_decrease_is_exact_when_others_keep_codes() {
        let keys = random_keys(6, 4, 3);
        let report = verify_positive_recon(&keys, 2, 2, 3).unwrap();
        assert!(report.passed());
        let books = fit_kmeans_pq(&keys, 2, 2, 100, 3).unwrap().books;
        let worst = report.steps[1].appended_key.unwrap();
        let mut words = Vec::new();
        for i in 0..2 {
            words.extend_from_slice(books.codebook(i));
            words.extend_from_slice(&keys[worst][i * 2..(i + 1) * 2]);
        }
        let grown = CodebookSet::new(2, 3, 4, words).unwrap();
        let unchanged = keys.iter().enumerate().filter(|&(k, _)| k != worst).all(|(_, key)| {
            books.assign(key, &SelectionVariant::L2).unwrap() == grown.assign(key, &SelectionVariant::L2).unwrap()
        });
        if unchanged {
            let drop = report.steps[0].loss - report.steps[1].loss;
            assert!((drop - report.steps[1].key_distortion).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(verify_positive_recon(&[[1.0], [1.0]], 1, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn shifts_inside_radius_keep_assignments(seed in 0u64..500, frac in 0.0f64..0.999) {
            let inst = random_instance(4, 2, 3, 20, 0, seed).unwrap();
            let radii = perturbation_radius(&inst.books, &inst.keys).unwrap();
            let mut spec = oriented_spec(&inst.books, &inst.keys, seed).unwrap();
            spec.magnitudes = radii.iter().map(|r| r * frac).collect();
            let shifted = apply_invariant_perturbation(&inst.books, &spec, &radii).unwrap();
            for k in &inst.keys {
                prop_assert_eq!(
                    inst.books.assign(k, &SelectionVariant::L2).unwrap(),
                    shifted.assign(k, &SelectionVariant::L2).unwrap()
                );
            }
        }
    }
}
