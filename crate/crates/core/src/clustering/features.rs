//! Item feature vectors for k-means: a truncated eigendecomposition of the
//! item co-occurrence matrix built from train sequences.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::table::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub dim: usize,
    /// Items within this many positions of each other co-occur.
    pub window: usize,
    pub power_iterations: usize,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            window: 3,
            power_iterations: 12,
            seed: 0,
        }
    }
}

/// Symmetric sparse matrix as sorted adjacency rows.
struct SparseSym {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseSym {
    fn from_sequences<'a>(n: usize, sequences: impl IntoIterator<Item = &'a [usize]>, window: usize) -> Self {
        let mut acc: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for seq in sequences {
            for (p, &a) in seq.iter().enumerate() {
                for &b in seq.iter().skip(p + 1).take(window) {
                    if a != b {
                        *acc[a].entry(b).or_default() += 1.0;
                        *acc[b].entry(a).or_default() += 1.0;
                    }
                }
            }
        }
        Self {
            rows: acc
                .into_iter()
                .map(|m| m.into_iter().map(|(j, c)| (j, (1.0 + c).ln())).collect())
                .collect(),
        }
    }

    /// `A · X` for a column-major block `X` (`cols` columns of length n).
    fn mul(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|col| {
                self.rows
                    .iter()
                    .map(|row| row.iter().map(|&(j, v)| v * col[j]).sum())
                    .collect()
            })
            .collect()
    }
}

fn orthonormalize(cols: &mut [Vec<f64>]) {
    for i in 0..cols.len() {
        for j in 0..i {
            let proj: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = cols.split_at_mut(i);
            for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                *a -= proj * b;
            }
        }
        let norm = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            cols[i].iter_mut().for_each(|v| *v /= norm);
        } else {
            cols[i].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix.
/// Returns `(eigenvalues, eigenvectors as columns)`.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i][i]).collect();
    let vectors = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

/// `|I| × dim` item features from the co-occurrence of items in train sequences.
///
/// Rows are the leading eigenvectors (by magnitude) scaled by `sqrt(|λ|)`.
pub fn cooccurrence_features<'a>(
    n_items: usize,
    sequences: impl IntoIterator<Item = &'a [usize]>,
    config: FeatureConfig,
) -> EmbeddingTable<f64> {
    let dim = config.dim.min(n_items).max(1);
    if n_items == 0 {
        return EmbeddingTable::zeros(0, dim);
    }
    let matrix = SparseSym::from_sequences(n_items, sequences, config.window.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut basis: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..n_items).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    orthonormalize(&mut basis);
    for _ in 0..config.power_iterations {
        basis = matrix.mul(&basis);
        orthonormalize(&mut basis);
    }
    let ab = matrix.mul(&basis);
    let small: Vec<Vec<f64>> = (0..dim)
        .map(|i| (0..dim).map(|j| basis[i].iter().zip(&ab[j]).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let (values, vectors) = jacobi_eigen(small);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));

    let mut out = EmbeddingTable::zeros(n_items, dim);
    for (col, &e) in order.iter().enumerate() {
        let scale = values[e].abs().sqrt();
        for item in 0..n_items {
            let u: f64 = (0..dim).map(|r| basis[r][item] * vectors[e][r]).sum();
            out.row_mut(item)[col] = u * scale;
        }
    }
    out
}

/// Reads an `|I| × p` feature matrix: one comma-separated row per item, optional header.
pub fn read_feature_csv(path: impl AsRef<Path>, n_items: usize) -> Result<EmbeddingTable<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if n == 0 => continue,
            Err(e) => {
                return Err(Error::InvalidArgument(format!(
                    "{}: line {}: {e}",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    if rows.len() != n_items {
        return Err(Error::DimMismatch {
            expected: n_items,
            actual: rows.len(),
            context: "feature rows vs items",
        });
    }
    EmbeddingTable::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::cluster_kmeans;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let (vals, vecs) = jacobi_eigen(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((sorted[0] - 1.0).abs() < 1e-12 && (sorted[1] - 3.0).abs() < 1e-12);
        for (l, v) in vals.iter().zip(&vecs) {
            let av = [2.0 * v[0] + v[1], v[0] + 2.0 * v[1]];
            assert!((av[0] - l * v[0]).abs() < 1e-10 && (av[1] - l * v[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn block_structure_is_recovered_by_kmeans() {
        // three groups of five items; sequences stay within a group
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seqs: Vec<Vec<usize>> = (0..300)
            .map(|u| {
                let g = u % 3;
                (0..6).map(|_| g * 5 + rng.gen_range(0..5)).collect()
            })
            .collect();
        let feats = cooccurrence_features(15, seqs.iter().map(Vec::as_slice), FeatureConfig { dim: 4, ..Default::default() });
        assert_eq!((feats.rows(), feats.dim()), (15, 4));
        let map = cluster_kmeans(0, &feats, 3, 0).unwrap();
        let a = map.item_assignment();
        for g in 0..3 {
            assert!(a[g * 5..g * 5 + 5].iter().all(|&c| c == a[g * 5]), "{a:?}");
        }
        assert_ne!(a[0], a[5]);
        assert_ne!(a[5], a[10]);
        assert_ne!(a[0], a[10]);
    }
}
