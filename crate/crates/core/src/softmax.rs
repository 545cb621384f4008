//! Full and two-level softmax over the unified text + item token space.
//!
//! All probability math runs in the log domain with max-shifted log-sum-exp.
//! Logits are plain dot products `⟨o, e_w⟩`; there are no biases.
//!
//! The two-level factorization is
//!
//! ```text
//! log P(w|H) = log P(c(w)|H) + log P(w | c(w), H)
//! ```
//!
//! where the first level is a softmax over cluster centroids and the second
//! a softmax over the members of `c(w)` only. A text token is its own cluster
//! and its centroid is its own text embedding row.

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterMap;
use crate::error::{Error, Result};
use crate::scalar::{dot_f64, logsumexp, Real};
use crate::table::EmbeddingTable;
use crate::token::{TokenId, TokenSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxMode {
    Full,
    #[default]
    TwoLevel,
}

impl SoftmaxMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SoftmaxMode::Full => "full",
            SoftmaxMode::TwoLevel => "twolevel",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            SoftmaxMode::Full => 0,
            SoftmaxMode::TwoLevel => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(SoftmaxMode::Full),
            1 => Some(SoftmaxMode::TwoLevel),
            _ => None,
        }
    }
}

impl std::str::FromStr for SoftmaxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SoftmaxMode::Full),
            "twolevel" | "two-level" | "two_level" => Ok(SoftmaxMode::TwoLevel),
            other => Err(Error::InvalidArgument(format!("unknown softmax mode `{other}` (expected full|twolevel)"))),
        }
    }
}

/// Final hidden state `o_n`, the query for every output distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector(Vec<f64>);

impl QueryVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("query vector has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn from_real<T: Real>(values: &[T]) -> Result<Self> {
        Self::new(values.iter().map(|v| v.to_f64_lossless()).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Number of `d`-dimensional dot products (and row updates) performed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounter {
    pub dots: u64,
    pub axpys: u64,
}

impl CostCounter {
    pub fn add_dots(&mut self, n: usize) {
        self.dots += n as u64;
    }

    pub fn add_axpys(&mut self, n: usize) {
        self.axpys += n as u64;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Output embeddings: text tokens `E^V`, projected items `E^I`, item-cluster centroids `E^C`.
///
/// Every mutable accessor bumps `version` so derived indexes can detect staleness.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputTables<T> {
    text: EmbeddingTable<T>,
    items: EmbeddingTable<T>,
    centroids: EmbeddingTable<T>,
    version: u64,
}

impl<T: Real> OutputTables<T> {
    pub fn new(text: EmbeddingTable<T>, items: EmbeddingTable<T>, centroids: EmbeddingTable<T>) -> Result<Self> {
        let dim = text.dim();
        for (table, context) in [(&items, "item table dim"), (&centroids, "centroid table dim")] {
            if table.rows() > 0 && table.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: table.dim(),
                    context,
                });
            }
        }
        Ok(Self {
            text,
            items,
            centroids,
            version: 0,
        })
    }

    pub fn space(&self) -> TokenSpace {
        TokenSpace::new(self.text.rows(), self.items.rows())
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn text(&self) -> &EmbeddingTable<T> {
        &self.text
    }

    pub fn items(&self) -> &EmbeddingTable<T> {
        &self.items
    }

    pub fn centroids(&self) -> &EmbeddingTable<T> {
        &self.centroids
    }

    pub fn text_mut(&mut self) -> &mut EmbeddingTable<T> {
        self.version += 1;
        &mut self.text
    }

    pub fn items_mut(&mut self) -> &mut EmbeddingTable<T> {
        self.version += 1;
        &mut self.items
    }

    pub fn centroids_mut(&mut self) -> &mut EmbeddingTable<T> {
        self.version += 1;
        &mut self.centroids
    }

    pub fn set_centroids(&mut self, centroids: EmbeddingTable<T>) {
        self.version += 1;
        self.centroids = centroids;
    }

    pub fn embedding(&self, token: TokenId) -> &[T] {
        match token {
            TokenId::Text(v) => self.text.row(v),
            TokenId::Item(i) => self.items.row(i),
        }
    }

    pub fn embedding_by_ordinal(&self, ordinal: usize) -> &[T] {
        let n_text = self.text.rows();
        if ordinal < n_text {
            self.text.row(ordinal)
        } else {
            self.items.row(ordinal - n_text)
        }
    }

    /// Centroid of a cluster id; text clusters alias the token's own row.
    pub fn centroid(&self, map: &ClusterMap, cluster: usize) -> &[T] {
        match map.item_cluster_index(cluster) {
            None => self.text.row(cluster),
            Some(j) => self.centroids.row(j),
        }
    }

    pub fn check_cluster_map(&self, map: &ClusterMap) -> Result<()> {
        if map.space() != self.space() {
            return Err(Error::InvalidArgument(format!(
                "cluster map covers {:?}, tables cover {:?}",
                map.space(),
                self.space()
            )));
        }
        if self.centroids.rows() != map.n_item_clusters() {
            return Err(Error::DimMismatch {
                expected: map.n_item_clusters(),
                actual: self.centroids.rows(),
                context: "centroid rows vs item clusters",
            });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.text.all_finite() && self.items.all_finite() && self.centroids.all_finite()
    }
}

fn logits_over_ordinals<T: Real>(query: &QueryVector, tables: &OutputTables<T>, ordinals: &[u32], cost: &mut CostCounter) -> Vec<f64> {
    cost.add_dots(ordinals.len());
    ordinals
        .iter()
        .map(|&o| dot_f64(tables.embedding_by_ordinal(o as usize), query.as_slice()))
        .collect()
}

fn all_logits<T: Real>(query: &QueryVector, tables: &OutputTables<T>, cost: &mut CostCounter) -> Vec<f64> {
    let q = query.as_slice();
    cost.add_dots(tables.space().len());
    tables
        .text
        .iter_rows()
        .chain(tables.items.iter_rows())
        .map(|row| dot_f64(row, q))
        .collect()
}

/// `log P(w|H)` under a softmax over every token.
pub fn full_logprob<T: Real>(query: &QueryVector, token: TokenId, tables: &OutputTables<T>, cost: &mut CostCounter) -> f64 {
    let logits = all_logits(query, tables, cost);
    logits[tables.space().ordinal(token)] - logsumexp(&logits)
}

/// `log P(c|H)` for every cluster id.
pub fn cluster_logprobs<T: Real>(query: &QueryVector, tables: &OutputTables<T>, map: &ClusterMap, cost: &mut CostCounter) -> Vec<f64> {
    let q = query.as_slice();
    cost.add_dots(map.n_clusters());
    let logits: Vec<f64> = (0..map.n_clusters())
        .map(|c| dot_f64(tables.centroid(map, c), q))
        .collect();
    let lse = logsumexp(&logits);
    logits.into_iter().map(|l| l - lse).collect()
}

/// `log P(w|c,H)` for each member of `cluster`, aligned with `map.members(cluster)`.
pub fn within_cluster_logprobs<T: Real>(
    query: &QueryVector,
    tables: &OutputTables<T>,
    map: &ClusterMap,
    cluster: usize,
    cost: &mut CostCounter,
) -> Vec<f64> {
    let logits = logits_over_ordinals(query, tables, map.members(cluster), cost);
    let lse = logsumexp(&logits);
    logits.into_iter().map(|l| l - lse).collect()
}

/// `log P(w|H) = log P(c(w)|H) + log P(w|c(w),H)`.
pub fn two_level_logprob<T: Real>(
    query: &QueryVector,
    token: TokenId,
    tables: &OutputTables<T>,
    map: &ClusterMap,
    cost: &mut CostCounter,
) -> f64 {
    let cluster = map.cluster_of(token);
    let level1 = cluster_logprobs(query, tables, map, cost);
    let level2 = within_cluster_logprobs(query, tables, map, cluster, cost);
    let ordinal = tables.space().ordinal(token) as u32;
    let pos = map
        .members(cluster)
        .binary_search(&ordinal)
        .expect("token is a member of its own cluster");
    level1[cluster] + level2[pos]
}

/// Exact `log P(w|H)` for every token, indexed by unified ordinal.
pub fn score_all<T: Real>(query: &QueryVector, tables: &OutputTables<T>, map: Option<&ClusterMap>, mode: SoftmaxMode) -> Vec<f64> {
    let mut cost = CostCounter::default();
    match (mode, map) {
        (SoftmaxMode::Full, _) => {
            let logits = all_logits(query, tables, &mut cost);
            let lse = logsumexp(&logits);
            logits.into_iter().map(|l| l - lse).collect()
        }
        (SoftmaxMode::TwoLevel, Some(map)) => {
            let level1 = cluster_logprobs(query, tables, map, &mut cost);
            let mut out = vec![0.0; tables.space().len()];
            for c in 0..map.n_clusters() {
                let level2 = within_cluster_logprobs(query, tables, map, c, &mut cost);
                for (&ord, lp) in map.members(c).iter().zip(level2) {
                    out[ord as usize] = level1[c] + lp;
                }
            }
            out
        }
        (SoftmaxMode::TwoLevel, None) => panic!("two-level scoring requires a cluster map"),
    }
}

/// Parameter row receiving a gradient of the form `coef · o`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRow {
    Text(usize),
    Item(usize),
    /// Row of the item-cluster centroid table.
    Centroid(usize),
}

/// Loss and exact gradients of `-log P(target|H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxGrad {
    pub loss: f64,
    pub d_query: Vec<f64>,
    /// Each row's gradient is `coef · o`.
    pub rows: Vec<(ParamRow, f64)>,
}

impl SoftmaxGrad {
    pub fn row_coef(&self, row: ParamRow) -> f64 {
        self.rows.iter().filter(|(r, _)| *r == row).map(|(_, c)| c).sum()
    }
}

fn row_vector<T: Real>(tables: &OutputTables<T>, row: ParamRow) -> &[T] {
    match row {
        ParamRow::Text(v) => tables.text.row(v),
        ParamRow::Item(i) => tables.items.row(i),
        ParamRow::Centroid(j) => tables.centroids.row(j),
    }
}

fn ordinal_row(space: TokenSpace, ordinal: usize) -> ParamRow {
    match space.token(ordinal).expect("ordinal in range") {
        TokenId::Text(v) => ParamRow::Text(v),
        TokenId::Item(i) => ParamRow::Item(i),
    }
}

fn cluster_row(map: &ClusterMap, cluster: usize) -> ParamRow {
    match map.item_cluster_index(cluster) {
        None => ParamRow::Text(cluster),
        Some(j) => ParamRow::Centroid(j),
    }
}

/// Pushes `(p_k - [k == target]) ` coefficients for a softmax block.
fn softmax_block(logits: &[f64], target_pos: usize, rows: impl Iterator<Item = ParamRow>, out: &mut Vec<(ParamRow, f64)>) -> f64 {
    let lse = logsumexp(logits);
    for (k, (l, row)) in logits.iter().zip(rows).enumerate() {
        let p = (l - lse).exp();
        let coef = if k == target_pos { p - 1.0 } else { p };
        if coef != 0.0 {
            out.push((row, coef));
        }
    }
    lse - logits[target_pos]
}

/// Negative log-likelihood of `target` with its gradients.
///
/// In two-level mode only the `|C|` centroids and the members of the target's
/// cluster receive gradient, and the cost is `|C| + |c(target)|` dot products.
pub fn nll_and_grad<T: Real>(
    query: &QueryVector,
    target: TokenId,
    tables: &OutputTables<T>,
    map: Option<&ClusterMap>,
    mode: SoftmaxMode,
    cost: &mut CostCounter,
) -> Result<SoftmaxGrad> {
    let space = tables.space();
    if !space.contains(target) {
        return Err(Error::InvalidArgument(format!("target {target:?} outside {space:?}")));
    }
    let mut rows = Vec::new();
    let loss = match mode {
        SoftmaxMode::Full => {
            let logits = all_logits(query, tables, cost);
            softmax_block(&logits, space.ordinal(target), (0..space.len()).map(|o| ordinal_row(space, o)), &mut rows)
        }
        SoftmaxMode::TwoLevel => {
            let map = map.ok_or_else(|| Error::InvalidArgument("two-level mode requires a cluster map".into()))?;
            let q = query.as_slice();
            let cluster = map.cluster_of(target);
            cost.add_dots(map.n_clusters());
            let level1: Vec<f64> = (0..map.n_clusters()).map(|c| dot_f64(tables.centroid(map, c), q)).collect();
            let mut loss = softmax_block(&level1, cluster, (0..map.n_clusters()).map(|c| cluster_row(map, c)), &mut rows);
            let members = map.members(cluster);
            let level2 = logits_over_ordinals(query, tables, members, cost);
            let pos = members
                .binary_search(&(space.ordinal(target) as u32))
                .expect("target is a member of its cluster");
            if map.is_text_cluster(cluster) {
                // singleton: P(w|c) = 1, no loss and no gradient
                debug_assert_eq!(members.len(), 1);
            } else {
                loss += softmax_block(&level2, pos, members.iter().map(|&o| ordinal_row(space, o as usize)), &mut rows);
            }
            loss
        }
    };

    let mut d_query = vec![0.0; tables.dim()];
    cost.add_axpys(rows.len());
    for &(row, coef) in &rows {
        for (d, e) in d_query.iter_mut().zip(row_vector(tables, row)) {
            *d += coef * e.to_f64_lossless();
        }
    }
    Ok(SoftmaxGrad { loss, d_query, rows })
}
