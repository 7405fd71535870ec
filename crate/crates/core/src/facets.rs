//! Sub-theme discovery inside one code: spherical k-means with a
//! silhouette-chosen k, an exact t-SNE layout, and model-written labels.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::provider::Gateway;
use crate::scoring::{normalize, EmbeddingVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FacetError {
    #[error("k = {k} is invalid for {n} points ({distinct} distinct)")]
    InvalidK { k: usize, n: usize, distinct: usize },
    #[error("facets need at least {needed} segments, have {have}")]
    FacetsUnavailable { needed: usize, have: usize },
    #[error("vectors have mixed dimensions")]
    DimensionMismatch,
    #[error("silhouette needs at least two non-empty clusters")]
    TooFewClusters,
}

pub const MAX_ITERATIONS: usize = 300;
pub const MAX_K: usize = 10;
pub const MIN_SEGMENTS: usize = 5;
pub const TSNE_MAX_POINTS: usize = 5000;
pub const TSNE_ITERATIONS: usize = 500;
pub const DEFAULT_PERPLEXITY: f64 = 15.0;
pub const LABEL_EXEMPLARS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared Euclidean distances after each iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = dot(v, v).sqrt();
    (n > 1e-12 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

fn check_dims(vectors: &[Vec<f64>]) -> Result<(), FacetError> {
    match vectors.first() {
        Some(f) if vectors.iter().any(|v| v.len() != f.len()) => Err(FacetError::DimensionMismatch),
        _ => Ok(()),
    }
}

fn distinct_count(vectors: &[Vec<f64>]) -> usize {
    vectors
        .iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

fn objective(vectors: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    vectors
        .iter()
        .zip(assignments)
        .map(|(v, &c)| sq_dist(v, &centroids[c]))
        .sum()
}

fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(v, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Spherical k-means on unit vectors: k-means++ seeding, then Lloyd steps
/// with normalised-mean centroids until assignments settle or
/// [`MAX_ITERATIONS`] pass.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult, FacetError> {
    check_dims(vectors)?;
    let n = vectors.len();
    let distinct = distinct_count(vectors);
    if k < 2 || k + 1 > n || k > distinct {
        return Err(FacetError::InvalidK { k, n, distinct });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![vectors[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let weights: Vec<f64> = vectors
            .iter()
            .map(|v| {
                centroids
                    .iter()
                    .map(|c| sq_dist(v, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut target = rng.random_range(0.0..total);
        let mut pick = n - 1;
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 && target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        while weights[pick] == 0.0 {
            pick -= 1;
        }
        centroids.push(vectors[pick].clone());
    }

    let mut assignments: Vec<usize> = vectors.iter().map(|v| nearest(v, &centroids)).collect();
    let mut trace = vec![objective(vectors, &assignments, &centroids)];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        fill_empty_clusters(vectors, &mut assignments, &centroids, k);
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let mut sum = vec![0.0; centroid.len()];
            for (v, _) in vectors.iter().zip(&assignments).filter(|(_, &a)| a == c) {
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x;
                }
            }
            // a zero mean leaves every direction equally good; keep the old one
            if let Some(u) = unit(&sum) {
                *centroid = u;
            }
        }
        let next: Vec<usize> = vectors.iter().map(|v| nearest(v, &centroids)).collect();
        let changed = next != assignments;
        assignments = next;
        trace.push(objective(vectors, &assignments, &centroids));
        if !changed {
            break;
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        objective_trace: trace,
        iterations,
    })
}

/// Moves the point farthest from its centroid into each empty cluster.
fn fill_empty_clusters(
    vectors: &[Vec<f64>],
    assignments: &mut [usize],
    centroids: &[Vec<f64>],
    k: usize,
) {
    for c in 0..k {
        if assignments.contains(&c) {
            continue;
        }
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let far = (0..vectors.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .max_by(|&i, &j| {
                sq_dist(&vectors[i], &centroids[assignments[i]])
                    .total_cmp(&sq_dist(&vectors[j], &centroids[assignments[j]]))
            });
        if let Some(i) = far {
            assignments[i] = c;
        }
    }
}

/// Mean silhouette with cosine distance. Points alone in their cluster
/// score 0, as do points whose intra and nearest-other distances are both 0.
pub fn silhouette(vectors: &[Vec<f64>], assignments: &[usize]) -> Result<f64, FacetError> {
    check_dims(vectors)?;
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(FacetError::TooFewClusters);
    }
    let n = vectors.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = assignments[i];
        if sizes[own] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[assignments[j]] += 1.0 - dot(&vectors[i], &vectors[j]);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// First k with the highest score; scores must be listed by ascending k.
pub fn best_k(scores: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(k, s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSearch {
    pub k: usize,
    pub scores: Vec<(usize, f64)>,
    pub clustering: KMeansResult,
}

/// Tries k over `[2, min(10, n − 1)]` with seed `seed + k` and keeps the
/// best silhouette, smallest k on ties.
pub fn optimal_k(vectors: &[Vec<f64>], seed: u64) -> Result<KSearch, FacetError> {
    let n = vectors.len();
    if n < 3 {
        return Err(FacetError::FacetsUnavailable { needed: 3, have: n });
    }
    let mut scores = Vec::new();
    let mut runs = BTreeMap::new();
    for k in 2..=MAX_K.min(n - 1) {
        let run = match kmeans(vectors, k, seed.wrapping_add(k as u64)) {
            Ok(r) => r,
            Err(FacetError::InvalidK { .. }) => break,
            Err(e) => return Err(e),
        };
        scores.push((k, silhouette(vectors, &run.assignments)?));
        runs.insert(k, run);
    }
    let k = best_k(&scores).ok_or(FacetError::InvalidK {
        k: 2,
        n,
        distinct: distinct_count(vectors),
    })?;
    Ok(KSearch {
        k,
        clustering: runs.remove(&k).expect("run kept for every scored k"),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneLayout {
    /// Input indices that were laid out, ascending.
    pub indices: Vec<usize>,
    pub coords: Vec<[f64; 2]>,
    pub perplexity: f64,
}

/// Exact t-SNE to two dimensions. Inputs beyond [`TSNE_MAX_POINTS`] are
/// subsampled with `seed`. Perplexity is lowered to `floor((n − 1) / 3)` when
/// too large for `n`. The layout is centred at the origin.
pub fn tsne_project(
    vectors: &[Vec<f64>],
    perplexity: f64,
    seed: u64,
) -> Result<TsneLayout, FacetError> {
    check_dims(vectors)?;
    if vectors.len() < MIN_SEGMENTS {
        return Err(FacetError::FacetsUnavailable {
            needed: MIN_SEGMENTS,
            have: vectors.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = if vectors.len() > TSNE_MAX_POINTS {
        let mut idx = index::sample(&mut rng, vectors.len(), TSNE_MAX_POINTS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..vectors.len()).collect()
    };
    let n = indices.len();
    let max_perplexity = ((n - 1) / 3) as f64;
    let perplexity = if perplexity >= max_perplexity {
        tracing::warn!(
            perplexity,
            reduced = max_perplexity,
            n,
            "perplexity too large, reducing"
        );
        max_perplexity
    } else {
        perplexity
    };

    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(&vectors[indices[i]], &vectors[indices[j]]);
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }
    let p = joint_probabilities(&d2, n, perplexity);

    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            [a * 1e-4, b * 1e-4]
        })
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let learning_rate = 200.0;
    let mut q = vec![0.0; n * n];
    for iter in 0..TSNE_ITERATIONS {
        let exaggeration = if iter < 100 { 12.0 } else { 1.0 };
        let momentum = if iter < 250 { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let w = 1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2));
                q[i * n + j] = w;
                q[j * n + i] = w;
                z += 2.0 * w;
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let coeff = 4.0 * (exaggeration * p[i * n + j] - w / z) * w;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                gains[i][d] = if (grad[d] > 0.0) != (velocity[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8f64).max(0.01)
                };
                velocity[i][d] = momentum * velocity[i][d] - learning_rate * gains[i][d] * grad[d];
            }
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        center(&mut y);
    }
    Ok(TsneLayout {
        indices,
        coords: y,
        perplexity,
    })
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mx = y.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = y.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in y.iter_mut() {
        p[0] -= mx;
        p[1] -= my;
    }
}

/// Symmetrised input affinities, each row calibrated by bisection on the
/// Gaussian precision to hit the target perplexity.
fn joint_probabilities(d2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.max(1.0).ln();
    let mut cond = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        let min_d = (0..n)
            .filter(|&j| j != i)
            .map(|j| d2[i * n + j])
            .fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i {
                    0.0
                } else {
                    (-(d2[i * n + j] - min_d) * beta).exp()
                };
                sum += row[j];
                weighted += row[j] * (d2[i * n + j] - min_d);
            }
            let entropy = sum.ln() + beta * weighted / sum;
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = if lo.is_finite() {
                    (beta + lo) / 2.0
                } else {
                    beta / 2.0
                };
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            cond[i * n + j] = row[j] / sum;
        }
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetSegment {
    pub segment_id: Uuid,
    pub text: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetResult {
    pub code_id: Uuid,
    pub k: usize,
    pub assignments: BTreeMap<Uuid, usize>,
    pub cluster_centroids: Vec<EmbeddingVector>,
    pub silhouette: f64,
    pub projection: BTreeMap<Uuid, [f64; 2]>,
    /// One entry per cluster; `None` when labelling failed.
    pub labels: Vec<Option<String>>,
    pub seed: u64,
}

/// Clusters, lays out and labels one code's segments. Label failures leave
/// the facet unlabelled.
pub async fn discover_facets(
    gateway: &Gateway,
    code_id: Uuid,
    segments: &[FacetSegment],
    seed: u64,
) -> Result<FacetResult, FacetError> {
    if segments.len() < MIN_SEGMENTS {
        return Err(FacetError::FacetsUnavailable {
            needed: MIN_SEGMENTS,
            have: segments.len(),
        });
    }
    let vectors: Vec<Vec<f64>> = segments
        .iter()
        .map(|s| s.vector.values().to_vec())
        .collect();
    let search = optimal_k(&vectors, seed)?;
    let layout = tsne_project(&vectors, DEFAULT_PERPLEXITY, seed)?;
    let clustering = &search.clustering;

    let mut labels = Vec::with_capacity(search.k);
    for (c, centroid) in clustering.centroids.iter().enumerate() {
        let mut members: Vec<usize> = (0..segments.len())
            .filter(|&i| clustering.assignments[i] == c)
            .collect();
        members.sort_by(|&a, &b| dot(&vectors[b], centroid).total_cmp(&dot(&vectors[a], centroid)));
        let exemplars: Vec<String> = members
            .iter()
            .take(LABEL_EXEMPLARS)
            .map(|&i| segments[i].text.clone())
            .collect();
        labels.push(match gateway.label_facet(&exemplars).await {
            Ok(l) => Some(l),
            Err(e) => {
                tracing::warn!(%code_id, cluster = c, error = %e, "facet label unavailable");
                None
            }
        });
    }

    Ok(FacetResult {
        code_id,
        k: search.k,
        assignments: segments
            .iter()
            .zip(&clustering.assignments)
            .map(|(s, &c)| (s.segment_id, c))
            .collect(),
        cluster_centroids: clustering
            .centroids
            .iter()
            .map(|c| {
                normalize(&EmbeddingVector::new(c.clone()).expect("centroid is finite"))
                    .expect("centroid is non-zero")
            })
            .collect(),
        silhouette: silhouette(&vectors, &clustering.assignments)?,
        projection: layout
            .indices
            .iter()
            .zip(&layout.coords)
            .map(|(&i, &xy)| (segments[i].segment_id, xy))
            .collect(),
        labels,
        seed,
    })
}
