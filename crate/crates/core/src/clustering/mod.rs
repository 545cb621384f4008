//! Partitions of the unified token space used by the two-level softmax.
//!
//! Cluster ids follow the token layout: text token `v` is alone in cluster `v`,
//! item clusters occupy ids `n_text..n_text + n_item_clusters`.

mod features;
mod kmeans;
mod simple;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use features::{cooccurrence_features, read_feature_csv, FeatureConfig};
pub use kmeans::{cluster_kmeans, kmeans, KMeansConfig, KMeansResult};
pub use simple::{cluster_frequency, cluster_random};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::table::EmbeddingTable;
use crate::token::{TokenId, TokenSpace};

/// `⌈√n_items⌉`, the default number of item clusters.
pub fn default_n_clusters(n_items: usize) -> usize {
    let mut r = (n_items as f64).sqrt().floor() as usize;
    while r * r < n_items {
        r += 1;
    }
    while r > 0 && (r - 1) * (r - 1) >= n_items {
        r -= 1;
    }
    r.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Kmeans,
    Frequency,
    Random,
}

impl ClusterMethod {
    pub const ALL: [ClusterMethod; 3] = [ClusterMethod::Kmeans, ClusterMethod::Frequency, ClusterMethod::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            ClusterMethod::Kmeans => "kmeans",
            ClusterMethod::Frequency => "frequency",
            ClusterMethod::Random => "random",
        }
    }
}

impl std::str::FromStr for ClusterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(ClusterMethod::Kmeans),
            "frequency" => Ok(ClusterMethod::Frequency),
            "random" => Ok(ClusterMethod::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown clustering `{other}` (expected kmeans|frequency|random)"
            ))),
        }
    }
}

/// Total map from tokens to clusters with inverted member lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMap {
    space: TokenSpace,
    n_item_clusters: usize,
    /// Cluster id per unified ordinal.
    assignment: Vec<u32>,
    /// Ordinals per cluster id, ascending.
    members: Vec<Vec<u32>>,
}

impl ClusterMap {
    /// Builds the map from a cluster index in `0..n_item_clusters` per item.
    pub fn from_item_assignment(n_text: usize, item_clusters: &[usize], n_item_clusters: usize) -> Result<Self> {
        let space = TokenSpace::new(n_text, item_clusters.len());
        let mut assignment = Vec::with_capacity(space.len());
        assignment.extend((0..n_text).map(|v| v as u32));
        for (i, &c) in item_clusters.iter().enumerate() {
            if c >= n_item_clusters {
                return Err(Error::InvalidArgument(format!(
                    "item {i} assigned to cluster {c} >= {n_item_clusters}"
                )));
            }
            assignment.push((n_text + c) as u32);
        }
        Self::from_assignment(space, n_item_clusters, assignment)
    }

    /// Rebuilds from a unified assignment array, validating every invariant.
    pub fn from_assignment(space: TokenSpace, n_item_clusters: usize, assignment: Vec<u32>) -> Result<Self> {
        if assignment.len() != space.len() {
            return Err(Error::DimMismatch {
                expected: space.len(),
                actual: assignment.len(),
                context: "cluster assignment length",
            });
        }
        let n_clusters = space.n_text + n_item_clusters;
        let mut members = vec![Vec::new(); n_clusters];
        for (ord, &c) in assignment.iter().enumerate() {
            let c = c as usize;
            if c >= n_clusters {
                return Err(Error::InvalidArgument(format!("ordinal {ord} maps to unknown cluster {c}")));
            }
            if ord < space.n_text && c != ord {
                return Err(Error::InvalidArgument(format!(
                    "text token {ord} must be its own cluster, found {c}"
                )));
            }
            if ord >= space.n_text && c < space.n_text {
                return Err(Error::InvalidArgument(format!(
                    "item ordinal {ord} assigned to text cluster {c}"
                )));
            }
            members[c].push(ord as u32);
        }
        if let Some(c) = (space.n_text..n_clusters).find(|&c| members[c].is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "item cluster {} is empty",
                c - space.n_text
            )));
        }
        Ok(Self {
            space,
            n_item_clusters,
            assignment,
            members,
        })
    }

    pub fn space(&self) -> TokenSpace {
        self.space
    }

    pub fn n_item_clusters(&self) -> usize {
        self.n_item_clusters
    }

    /// |C|: text singletons plus item clusters.
    pub fn n_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn cluster_of(&self, token: TokenId) -> usize {
        self.assignment[self.space.ordinal(token)] as usize
    }

    pub fn cluster_of_ordinal(&self, ordinal: usize) -> usize {
        self.assignment[ordinal] as usize
    }

    pub fn members(&self, cluster: usize) -> &[u32] {
        &self.members[cluster]
    }

    pub fn is_text_cluster(&self, cluster: usize) -> bool {
        cluster < self.space.n_text
    }

    /// Item cluster index (row in the centroid table) of a cluster id.
    pub fn item_cluster_index(&self, cluster: usize) -> Option<usize> {
        cluster.checked_sub(self.space.n_text)
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    /// Cluster index in `0..n_item_clusters` for every item.
    pub fn item_assignment(&self) -> Vec<usize> {
        self.assignment[self.space.n_text..]
            .iter()
            .map(|&c| c as usize - self.space.n_text)
            .collect()
    }

    pub fn max_cluster_size(&self) -> usize {
        self.members.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn item_cluster_sizes(&self) -> Vec<usize> {
        self.members[self.space.n_text..].iter().map(Vec::len).collect()
    }

    /// Writes `ordinal,cluster` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "ordinal,cluster")?;
        for (ord, c) in self.assignment.iter().enumerate() {
            writeln!(out, "{ord},{c}")?;
        }
        Ok(())
    }

    pub fn read_csv(text: &str, space: TokenSpace) -> Result<Self> {
        let mut assignment = vec![u32::MAX; space.len()];
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parse = |s: Option<&str>| -> Result<usize> {
                s.and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("cluster csv line {}: `{line}`", n + 1)))
            };
            let mut parts = line.split(',');
            let ord = parse(parts.next())?;
            let c = parse(parts.next())?;
            if ord >= space.len() {
                return Err(Error::InvalidArgument(format!("cluster csv ordinal {ord} out of range")));
            }
            assignment[ord] = c as u32;
        }
        if assignment.contains(&u32::MAX) {
            return Err(Error::InvalidArgument("cluster csv does not cover every token".into()));
        }
        let n_clusters = assignment.iter().map(|&c| c as usize + 1).max().unwrap_or(space.n_text);
        Self::from_assignment(space, n_clusters.saturating_sub(space.n_text), assignment)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidInit {
    #[default]
    Mean,
    Random,
}

/// Centroid table for item clusters.
///
/// Text clusters have no row here: their centroid is the token's own row in
/// the text table, shared rather than copied.
pub fn init_centroids<T: Real, R: Rng>(
    map: &ClusterMap,
    items: &EmbeddingTable<T>,
    text: &EmbeddingTable<T>,
    init: CentroidInit,
    rng: &mut R,
) -> Result<EmbeddingTable<T>> {
    if items.dim() != text.dim() {
        return Err(Error::DimMismatch {
            expected: text.dim(),
            actual: items.dim(),
            context: "projected items vs text table",
        });
    }
    if items.rows() != map.space().n_items || text.rows() != map.space().n_text {
        return Err(Error::DimMismatch {
            expected: map.space().len(),
            actual: items.rows() + text.rows(),
            context: "table rows vs cluster map",
        });
    }
    let dim = items.dim();
    let n_text = map.space().n_text;
    match init {
        CentroidInit::Random => Ok(EmbeddingTable::uniform(
            map.n_item_clusters(),
            dim,
            1.0 / (dim.max(1) as f64).sqrt(),
            rng,
        )),
        CentroidInit::Mean => {
            let mut out = EmbeddingTable::zeros(map.n_item_clusters(), dim);
            for j in 0..map.n_item_clusters() {
                let members = map.members(n_text + j);
                let mut acc = vec![0.0f64; dim];
                for &ord in members {
                    for (a, v) in acc.iter_mut().zip(items.row(ord as usize - n_text)) {
                        *a += v.to_f64_lossless();
                    }
                }
                let n = members.len() as f64;
                for (o, a) in out.row_mut(j).iter_mut().zip(acc) {
                    *o = T::from_f64_lossy(a / n);
                }
            }
            Ok(out)
        }
    }
}

/// Splits `order` into `n_clusters` contiguous bins whose sizes differ by at most one.
pub(crate) fn slice_into_bins(order: &[usize], n_clusters: usize) -> Vec<usize> {
    let n = order.len();
    let mut assignment = vec![0usize; n];
    let base = n / n_clusters;
    let extra = n % n_clusters;
    let mut pos = 0;
    for c in 0..n_clusters {
        let size = base + usize::from(c < extra);
        for &item in &order[pos..pos + size] {
            assignment[item] = c;
        }
        pos += size;
    }
    assignment
}

pub(crate) fn check_n_clusters(n_items: usize, n_clusters: usize) -> Result<()> {
    if n_clusters == 0 {
        return Err(Error::InvalidArgument("n_clusters must be at least 1".into()));
    }
    if n_clusters > n_items {
        return Err(Error::InvalidArgument(format!(
            "n_clusters {n_clusters} exceeds the number of items {n_items}"
        )));
    }
    Ok(())
}
