use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_n_clusters, slice_into_bins, ClusterMap};
use crate::error::Result;

/// Groups items with similar train-split counts: sort by count descending
/// (ordinal ascending on ties) and slice into near-equal contiguous bins.
pub fn cluster_frequency(n_text: usize, counts: &[u64], n_clusters: usize) -> Result<ClusterMap> {
    check_n_clusters(counts.len(), n_clusters)?;
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    ClusterMap::from_item_assignment(n_text, &slice_into_bins(&order, n_clusters), n_clusters)
}

/// Seeded shuffle followed by near-equal contiguous slicing.
pub fn cluster_random(n_text: usize, n_items: usize, n_clusters: usize, seed: u64) -> Result<ClusterMap> {
    check_n_clusters(n_items, n_clusters)?;
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ClusterMap::from_item_assignment(n_text, &slice_into_bins(&order, n_clusters), n_clusters)
}
