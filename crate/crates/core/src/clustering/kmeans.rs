use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_n_clusters, ClusterMap};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::table::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iterations: usize,
    /// Stop once the total centroid shift falls below this fraction of the centroid norm.
    pub relative_tolerance: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            relative_tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to assigned centroids.
    pub objective: f64,
    pub iterations: usize,
}

fn sq_dist<T: Real>(x: &[T], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(a, b)| {
            let d = a.to_f64_lossless() - b;
            d * d
        })
        .sum()
}

fn to_f64<T: Real>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.to_f64_lossless()).collect()
}

fn plus_plus_seed<T: Real>(data: &EmbeddingTable<T>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.rows();
    let mut centroids = vec![to_f64(data.row(rng.gen_range(0..n)))];
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        let c = to_f64(data.row(next));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(data.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign<T: Real>(data: &EmbeddingTable<T>, centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    (0..data.rows())
        .into_par_iter()
        .map(|i| {
            let x = data.row(i);
            let mut best = (0, f64::INFINITY);
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(x, cent);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

/// Moves the point farthest from its centroid into each empty cluster.
fn fill_empty_clusters(assigned: &mut [(usize, f64)], k: usize) {
    let mut sizes = vec![0usize; k];
    for &(c, _) in assigned.iter() {
        sizes[c] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let donor = assigned
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| sizes[*c] > 1)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("k <= n guarantees a cluster with two members");
        sizes[assigned[donor].0] -= 1;
        sizes[empty] = 1;
        assigned[donor] = (empty, 0.0);
    }
}

fn means<T: Real>(data: &EmbeddingTable<T>, assigned: &[(usize, f64)], k: usize) -> Vec<Vec<f64>> {
    let mut acc = vec![vec![0.0; data.dim()]; k];
    let mut counts = vec![0usize; k];
    for (i, &(c, _)) in assigned.iter().enumerate() {
        counts[c] += 1;
        for (a, v) in acc[c].iter_mut().zip(data.row(i)) {
            *a += v.to_f64_lossless();
        }
    }
    for (row, n) in acc.iter_mut().zip(counts) {
        for a in row.iter_mut() {
            *a /= n.max(1) as f64;
        }
    }
    acc
}

/// Lloyd iterations from k-means++ seeding. Every returned cluster is non-empty.
pub fn kmeans<T: Real>(data: &EmbeddingTable<T>, k: usize, config: KMeansConfig) -> Result<KMeansResult> {
    check_n_clusters(data.rows(), k)?;
    if !data.all_finite() {
        return Err(Error::InvalidArgument("k-means input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = plus_plus_seed(data, k, &mut rng);
    let mut assigned = Vec::new();
    let mut iterations = 0;
    for _ in 0..config.max_iterations.max(1) {
        iterations += 1;
        assigned = assign(data, &centroids);
        fill_empty_clusters(&mut assigned, k);
        let updated = means(data, &assigned, k);
        let shift: f64 = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
            .sum();
        let norm: f64 = updated.iter().flat_map(|c| c.iter()).map(|v| v * v).sum();
        centroids = updated;
        if shift.sqrt() <= config.relative_tolerance * norm.sqrt().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let objective = assigned
        .iter()
        .enumerate()
        .map(|(i, &(c, _))| sq_dist(data.row(i), &centroids[c]))
        .sum();
    Ok(KMeansResult {
        assignment: assigned.into_iter().map(|(c, _)| c).collect(),
        centroids,
        objective,
        iterations,
    })
}

/// K-means over per-item feature vectors, wrapped as a [`ClusterMap`].
pub fn cluster_kmeans<T: Real>(
    n_text: usize,
    item_vectors: &EmbeddingTable<T>,
    n_clusters: usize,
    seed: u64,
) -> Result<ClusterMap> {
    let result = kmeans(
        item_vectors,
        n_clusters,
        KMeansConfig {
            seed,
            ..KMeansConfig::default()
        },
    )?;
    ClusterMap::from_item_assignment(n_text, &result.assignment, n_clusters)
}
