//! Lloyd's k-means per subspace, for non-supervised PQ and codebook
//! initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::quantizer::{CodebookSet, QuantError};

/// Result of clustering one subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    /// Row-major `L×s` centers.
    pub centers: Vec<f64>,
    /// Sum of squared distances after each assignment step.
    pub objectives: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[f64], s: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.chunks_exact(s).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
fn seed_centers<R: Rng>(points: &[f64], s: usize, l: usize, rng: &mut R) -> Vec<f64> {
    let n = points.len() / s;
    let mut centers = Vec::with_capacity(l * s);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&points[first * s..(first + 1) * s]);
    let mut dist: Vec<f64> = points.chunks_exact(s).map(|p| sq_dist(p, &centers[..s])).collect();
    while centers.len() < l * s {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick * s..(pick + 1) * s].to_vec();
        for (d, p) in dist.iter_mut().zip(points.chunks_exact(s)) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.extend(c);
    }
    centers
}

/// Clusters `points` (row-major `n×s`) into `l` centers with at most
/// `iters` Lloyd iterations, stopping early once assignments are stable.
/// Empty clusters are re-seeded at the point farthest from its center.
pub fn kmeans(points: &[f64], s: usize, l: usize, iters: usize, seed: u64) -> Result<KMeansFit, QuantError> {
    if s == 0 || points.is_empty() || !points.len().is_multiple_of(s) {
        return Err(QuantError::Empty("k-means needs at least one point"));
    }
    if l == 0 || iters == 0 {
        return Err(QuantError::Geometry(format!("k-means with L={l}, iters={iters}")));
    }
    let n = points.len() / s;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(points, s, l, &mut rng);
    let mut assign = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut objectives = Vec::new();
    let mut iterations = 0;
    for _ in 0..iters {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.chunks_exact(s).enumerate() {
            let (j, d) = nearest(p, &centers, s);
            changed |= assign[i] != j;
            assign[i] = j;
            dists[i] = d;
        }
        objectives.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = vec![0.0; l * s];
        let mut counts = vec![0usize; l];
        for (i, p) in points.chunks_exact(s).enumerate() {
            counts[assign[i]] += 1;
            for (acc, v) in sums[assign[i] * s..(assign[i] + 1) * s].iter_mut().zip(p) {
                *acc += v;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..l {
            if counts[j] > 0 {
                for (c, sum) in centers[j * s..(j + 1) * s].iter_mut().zip(&sums[j * s..(j + 1) * s]) {
                    *c = sum / counts[j] as f64;
                }
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i])
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far {
                taken[i] = true;
                centers[j * s..(j + 1) * s].copy_from_slice(&points[i * s..(i + 1) * s]);
            }
        }
    }
    Ok(KMeansFit {
        centers,
        objectives,
        iterations,
    })
}

/// Per-subspace objective traces of [`fit_kmeans_pq`].
#[derive(Clone, Debug, PartialEq)]
pub struct PqFit {
    pub books: CodebookSet,
    pub objectives: Vec<Vec<f64>>,
}

/// Product-quantization codebooks by k-means in each of `m` subspaces.
pub fn fit_kmeans_pq<K: AsRef<[f64]>>(
    embeddings: &[K],
    m: usize,
    l: usize,
    iters: usize,
    seed: u64,
) -> Result<PqFit, QuantError> {
    let first = embeddings.first().ok_or(QuantError::Empty("k-means PQ over no embeddings"))?;
    let d = first.as_ref().len();
    if m == 0 || d % m != 0 {
        return Err(QuantError::NotDivisible { d, m });
    }
    let s = d / m;
    let mut codewords = Vec::with_capacity(l * d);
    let mut objectives = Vec::with_capacity(m);
    for i in 0..m {
        let mut sub = Vec::with_capacity(embeddings.len() * s);
        for e in embeddings {
            let e = e.as_ref();
            if e.len() != d {
                return Err(QuantError::LengthMismatch {
                    expected: d,
                    actual: e.len(),
                });
            }
            sub.extend_from_slice(&e[i * s..(i + 1) * s]);
        }
        let fit = kmeans(&sub, s, l, iters, seed.wrapping_add(i as u64))?;
        codewords.extend(fit.centers);
        objectives.push(fit.objectives);
    }
    Ok(PqFit {
        books: CodebookSet::new(m, l, d, codewords)?,
        objectives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_dimensional_fixture() {
        for seed in 0..20 {
            let fit = kmeans(&[0.0, 1.0, 10.0, 11.0], 1, 2, 50, seed).unwrap();
            let mut c = fit.centers.clone();
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(c, vec![0.5, 10.5], "seed {seed}");
        }
    }

    #[test]
    fn points_at_centers_reach_zero() {
        let pts = [0.0, 0.0, 5.0, 5.0, -3.0, 2.0];
        let fit = kmeans(&pts, 2, 3, 10, 4).unwrap();
        assert_eq!(fit.objectives[0], 0.0);
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // Fewer distinct points than clusters: no panic, zero objective.
        let pts = [1.0, 1.0, 1.0, 2.0];
        let fit = kmeans(&pts, 1, 3, 10, 0).unwrap();
        assert_eq!(*fit.objectives.last().unwrap(), 0.0);
    }

    #[test]
    fn pq_fit_geometry() {
        let emb = vec![vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 1.0, 0.0, 0.0], vec![5.0, 5.0, 5.0, 5.0]];
        let fit = fit_kmeans_pq(&emb, 2, 2, 10, 1).unwrap();
        assert_eq!((fit.books.m(), fit.books.l(), fit.books.d()), (2, 2, 4));
        assert!(fit_kmeans_pq(&emb, 3, 2, 10, 1).is_err());
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(fit_kmeans_pq(&empty, 1, 2, 10, 1).is_err());
    }

    proptest! {
        #[test]
        fn objective_never_increases(pts in prop::collection::vec(-10.0f64..10.0, 2..80), l in 1usize..6, seed in 0u64..100) {
            let s = 2;
            let pts = &pts[..pts.len() / s * s];
            prop_assume!(!pts.is_empty());
            let fit = kmeans(pts, s, l, 30, seed).unwrap();
            for w in fit.objectives.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", fit.objectives);
            }
        }
    }
}
