//! Chunk embeddings, k-means clustering, representative sampling and PCA.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Chunk;

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub chunk_id: usize,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(&a.values, &b.values) / (na * nb)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn trigram_buckets(text: &str, dim: usize) -> HashMap<usize, f64> {
    let chars: Vec<char> = text.chars().collect();
    let mut counts = HashMap::new();
    let mut buf = [0u8; 12];
    for w in chars.windows(3) {
        let mut n = 0;
        for c in w {
            n += c.encode_utf8(&mut buf[n..]).len();
        }
        let bucket = (fnv1a(&buf[..n]) % dim as u64) as usize;
        *counts.entry(bucket).or_insert(0.0) += 1.0;
    }
    counts
}

/// Hashed character-trigram TF-IDF vectors, L2-normalized.
///
/// IDF is smoothed as `ln((1 + n) / (1 + df)) + 1` over the given chunks.
/// Chunks with no trigrams get the zero vector.
pub fn embed_chunks(chunks: &[Chunk], dim: usize) -> Vec<EmbeddingVector> {
    assert!(dim >= 16, "embedding dimension must be at least 16");
    let tfs: Vec<HashMap<usize, f64>> = chunks
        .par_iter()
        .map(|c| trigram_buckets(&c.text, dim))
        .collect();
    let mut df = vec![0.0f64; dim];
    for tf in &tfs {
        for &bucket in tf.keys() {
            df[bucket] += 1.0;
        }
    }
    let n = chunks.len() as f64;
    let idf: Vec<f64> = df.iter().map(|d| ((1.0 + n) / (1.0 + d)).ln() + 1.0).collect();
    chunks
        .par_iter()
        .zip(tfs.par_iter())
        .map(|(chunk, tf)| {
            let mut values = vec![0.0; dim];
            for (&bucket, &count) in tf {
                values[bucket] = count * idf[bucket];
            }
            let len = norm(&values);
            if len > 0.0 {
                values.iter_mut().for_each(|v| *v /= len);
            }
            EmbeddingVector {
                chunk_id: chunk.id,
                values,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Chunk ids in input order.
    pub chunk_ids: Vec<usize>,
    /// Cluster index per input vector.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// The input vectors, kept for distance queries.
    pub points: Vec<Vec<f64>>,
    pub k: usize,
    pub seed: u64,
    pub iterations: usize,
}

impl Clustering {
    pub fn cluster_of(&self, chunk_id: usize) -> Option<usize> {
        let i = self.chunk_ids.iter().position(|&c| c == chunk_id)?;
        Some(self.assignments[i])
    }

    /// Input indices belonging to `cluster`.
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }
}

/// `min(8, ceil(sqrt(n)))`.
pub fn default_k(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).clamp(1, 8)
}

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

/// Seeded k-means with k-means++ initialization.
///
/// Stops when no centroid moves more than 1e-6 or after 100 iterations.
/// Empty clusters are refilled with the point farthest from its centroid, so
/// every cluster has at least one member.
pub fn cluster(vectors: &[EmbeddingVector], k: Option<usize>, seed: u64) -> Clustering {
    assert!(!vectors.is_empty(), "cannot cluster zero vectors");
    let n = vectors.len();
    let k = k.unwrap_or_else(|| default_k(n)).clamp(1, n);
    let points: Vec<Vec<f64>> = vectors.iter().map(|v| v.values.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut iterations = 0;

    for iter in 1..=KMEANS_MAX_ITER {
        iterations = iter;
        for (i, p) in points.iter().enumerate() {
            assignments[i] = nearest(p, &centroids).0;
        }
        repair_empty(&points, &mut assignments, &centroids, k);
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest(p, &centroids).0;
    }
    repair_empty(&points, &mut assignments, &centroids, k);

    Clustering {
        chunk_ids: vectors.iter().map(|v| v.chunk_id).collect(),
        assignments,
        centroids,
        points,
        k,
        seed,
        iterations,
    }
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // all remaining points coincide with a chosen centroid
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            *free.choose(rng).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        // steal the worst-fitting point from a cluster that can spare one
        let donor = (0..points.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(&points[a], &centroids[assignments[a]]);
                let db = sq_dist(&points[b], &centroids[assignments[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= n guarantees a donor");
        assignments[donor] = empty;
    }
}

/// Per cluster: the member nearest the centroid, then `per_cluster - 1`
/// seeded uniform picks from the rest. Output is ordered by cluster, then by
/// distance to the centroid. Returns chunk ids.
pub fn sample_representatives(clustering: &Clustering, per_cluster: usize, seed: u64) -> Vec<usize> {
    assert!(per_cluster >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..clustering.k {
        let centroid = &clustering.centroids[c];
        let dist = |i: usize| sq_dist(&clustering.points[i], centroid);
        let mut members = clustering.members(c);
        members.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        let mut picked = if members.len() <= per_cluster {
            members
        } else {
            let head = members[0];
            let rest = &members[1..];
            let mut picked = vec![head];
            picked.extend(rand::seq::index::sample(&mut rng, rest.len(), per_cluster - 1).into_iter().map(|j| rest[j]));
            picked
        };
        picked.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        out.extend(picked.into_iter().map(|i| clustering.chunk_ids[i]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub points: Vec<Vec<f64>>,
    /// Unit-length principal directions, one per requested dimension.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// Set when the data has fewer than `dims` non-trivial directions; the
    /// missing components are zero.
    pub degenerate: bool,
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITER: usize = 100_000;

/// Projects rows onto their top principal components, found by power
/// iteration with deflation on the sample covariance.
pub fn pca_project<V: AsRef<[f64]>>(vectors: &[V], dims: usize) -> PcaProjection {
    let n = vectors.len();
    assert!(n >= dims && dims >= 1, "need at least {dims} vectors");
    let d = vectors[0].as_ref().len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        mean.iter_mut().zip(v.as_ref()).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.as_ref().iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let denom = (n.max(2) - 1) as f64;
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centered {
        for i in 0..d {
            if row[i] == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i][j] += row[i] * row[j] / denom;
            }
        }
    }
    for i in 1..d {
        let (upper, lower) = cov.split_at_mut(i);
        for (j, row) in upper.iter().enumerate() {
            lower[0][j] = row[i];
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    let floor = 1e-12 * trace.max(1e-300);

    let mut components = Vec::with_capacity(dims);
    let mut explained = Vec::with_capacity(dims);
    let mut degenerate = false;
    for k in 0..dims {
        match power_iteration(&cov, k) {
            Some((lambda, v)) if lambda > floor && trace > 0.0 => {
                // deflate
                for i in 0..d {
                    for j in 0..d {
                        cov[i][j] -= lambda * v[i] * v[j];
                    }
                }
                explained.push(lambda);
                components.push(v);
            }
            _ => {
                degenerate = true;
                explained.push(0.0);
                components.push(vec![0.0; d]);
            }
        }
    }
    let points = centered
        .iter()
        .map(|row| components.iter().map(|c| dot(row, c)).collect())
        .collect();
    PcaProjection {
        points,
        components,
        explained_variance: explained,
        degenerate,
    }
}

fn power_iteration(m: &[Vec<f64>], salt: usize) -> Option<(f64, Vec<f64>)> {
    let d = m.len();
    if d == 0 {
        return None;
    }
    // deterministic, non-axis-aligned start
    let mut v: Vec<f64> = (0..d)
        .map(|i| 1.0 + ((i * 7919 + salt * 104_729) % 1000) as f64 / 1000.0)
        .collect();
    let len = norm(&v);
    v.iter_mut().for_each(|x| *x /= len);
    let mut lambda = 0.0;
    for _ in 0..PCA_MAX_ITER {
        let mut w: Vec<f64> = m.iter().map(|row| dot(row, &v)).collect();
        let len = norm(&w);
        if len == 0.0 || !len.is_finite() {
            return None;
        }
        w.iter_mut().for_each(|x| *x /= len);
        // the sign may flip for negative eigenvalues; covariance is PSD
        let delta = sq_dist(&w, &v).sqrt();
        v = w;
        lambda = len;
        if delta < PCA_TOL {
            break;
        }
    }
    let lambda_rq = dot(&v, &m.iter().map(|row| dot(row, &v)).collect::<Vec<_>>());
    lambda = lambda_rq.max(0.0).min(lambda.max(lambda_rq));
    // largest-magnitude loading positive
    let pivot = v
        .iter()
        .copied()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Some((lambda, v))
}
