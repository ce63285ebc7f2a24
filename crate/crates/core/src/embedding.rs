//! Event vectors via signed feature hashing, and the prototype codebook
//! learned over them with k-means.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_PROTOTYPES: usize = 32;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

const MAX_ITERATIONS: usize = 100;
const SHIFT_TOLERANCE: f64 = 1e-6;
const MIN_SEPARATION: f64 = 1e-8;

/// Fixed-dimension embedding of one log event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventVector(pub Vec<f64>);

impl EventVector {
    pub fn zeros(d: usize) -> Self {
        EventVector(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// 64-bit FNV-1a. Stable across platforms and toolchains, unlike `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bucket index and sign for a token.
fn hash_token(token: &str, d: usize) -> (usize, f64) {
    let h = fnv1a(token.as_bytes());
    let bucket = (h % d as u64) as usize;
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

/// Signed feature-hashing embedding, L2-normalized. Empty input gives the zero vector.
pub fn embed_event<S: AsRef<str>>(tokens: &[S], d: usize) -> EventVector {
    assert!(d >= 8, "embedding dimension must be at least 8, got {d}");
    let mut v = vec![0.0; d];
    for t in tokens {
        let (bucket, sign) = hash_token(t.as_ref(), d);
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    // All tokens may cancel (a and b hash to one bucket with opposite
    // signs); fall back to the smallest token's bucket so non-empty input
    // is never the zero vector and order still does not matter.
    if norm == 0.0 {
        if let Some(first) = tokens.iter().map(AsRef::as_ref).min() {
            let (bucket, sign) = hash_token(first, d);
            v[bucket] = sign;
        }
    }
    EventVector(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeCodebook {
    /// K rows of dimension d.
    pub prototypes: Vec<Vec<f64>>,
    pub temperature: f64,
    pub seed: u64,
}

impl PrototypeCodebook {
    pub fn new(prototypes: Vec<Vec<f64>>, temperature: f64, seed: u64) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(Error::Config("codebook needs at least one prototype".into()));
        }
        let d = prototypes[0].len();
        if prototypes.iter().any(|p| p.len() != d) {
            return Err(Error::Config("prototypes have inconsistent dimensions".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        if prototypes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("prototype values must be finite".into()));
        }
        Ok(PrototypeCodebook {
            prototypes,
            temperature,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    /// Smallest pairwise L2 distance between prototypes (infinite for K = 1).
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.prototypes.iter().enumerate() {
            for b in &self.prototypes[i + 1..] {
                best = best.min(sq_dist(a, b).sqrt());
            }
        }
        best
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let dist = sq_dist(point, c);
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best
}

fn count_distinct(points: &[&[f64]]) -> usize {
    let set: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    set.len()
}

fn kmeans_pp_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, d) in dist.iter().enumerate() {
            if *d <= 0.0 {
                continue;
            }
            chosen = Some(i);
            if target < *d {
                break;
            }
            target -= d;
        }
        // At least K distinct points exist, so some point is at positive distance.
        let next = points[chosen.expect("k-means++ found no uncovered point")].to_vec();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &next));
        }
        centroids.push(next);
    }
    centroids
}

/// Result of a k-means run, with the objective recorded after each assignment step.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(Error::Config(format!(
            "k-means needs at least K = {k} distinct vectors, got {distinct}"
        )));
    }
    let d = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut assignment = vec![0usize; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let mut objective = 0.0;
        let mut point_dist = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, dist) = nearest(p, &centroids);
            assignment[i] = c;
            point_dist[i] = dist;
            objective += dist;
        }
        trace.push(objective);

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
        }
        // An empty cluster takes over the point worst served by its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) = point_dist
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| counts[assignment[*i]] > 1)
                    .fold((usize::MAX, -1.0), |best, (i, &dd)| if dd > best.1 { (i, dd) } else { best });
                if far == usize::MAX {
                    continue;
                }
                let old = assignment[far];
                counts[old] -= 1;
                sums[old].iter_mut().zip(points[far].iter()).for_each(|(s, v)| *s -= v);
                assignment[far] = c;
                counts[c] = 1;
                sums[c] = points[far].to_vec();
                point_dist[far] = 0.0;
            }
        }

        let mut max_shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            max_shift = max_shift.max(sq_dist(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if max_shift < SHIFT_TOLERANCE {
            break;
        }
    }

    Ok(KMeansFit {
        centroids,
        objective_trace: trace,
        iterations,
    })
}

/// Fits K prototypes over event vectors.
pub fn fit_prototypes(vectors: &[EventVector], k: usize, temperature: f64, seed: u64) -> Result<PrototypeCodebook> {
    if vectors.is_empty() {
        return Err(Error::Config("cannot fit prototypes on zero vectors".into()));
    }
    let points: Vec<&[f64]> = vectors.iter().map(|v| v.as_slice()).collect();
    let fit = kmeans(&points, k, seed)?;
    let book = PrototypeCodebook::new(fit.centroids, temperature, seed)?;
    if book.min_separation() < MIN_SEPARATION {
        return Err(Error::Config("k-means produced coincident prototypes".into()));
    }
    Ok(book)
}
