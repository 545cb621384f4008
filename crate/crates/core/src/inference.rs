//! Top-K token generation from a query vector.
//!
//! Three engines share one ranking order (score descending, unified ordinal
//! ascending on ties):
//!
//! * exact enumeration of every two-level log-probability,
//! * best-first cluster expansion pruned by `P(w|H) <= P(c(w)|H)`, which
//!   returns the same list as exact enumeration,
//! * maximum inner product search over `e_c(w) + e_w`, which drops the
//!   per-cluster log-partition term and is therefore approximate.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterMap;
use crate::error::{Error, Result};
use crate::scalar::{dot_f64, Real};
use crate::softmax::{cluster_logprobs, score_all, within_cluster_logprobs, CostCounter, OutputTables, QueryVector, SoftmaxMode};
use crate::table::EmbeddingTable;
use crate::token::{TokenId, TokenSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    /// Enumerate every score under the model's softmax mode.
    Full,
    Structure,
    Ann,
}

impl Engine {
    pub fn as_str(self) -> &'static str {
        match self {
            Engine::Full => "full",
            Engine::Structure => "structure",
            Engine::Ann => "ann",
        }
    }
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Engine::Full),
            "structure" => Ok(Engine::Structure),
            "ann" => Ok(Engine::Ann),
            other => Err(Error::InvalidArgument(format!("unknown engine `{other}` (expected full|structure|ann)"))),
        }
    }
}

/// A scored token, ordered so that `a > b` means `a` ranks ahead of `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked {
    score: f64,
    ordinal: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.ordinal.cmp(&self.ordinal))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// `true` if `(score_a, ord_a)` ranks strictly ahead of `(score_b, ord_b)`.
#[inline]
pub fn ranks_ahead(score_a: f64, ord_a: usize, score_b: f64, ord_b: usize) -> bool {
    Ranked { score: score_a, ordinal: ord_a } > Ranked { score: score_b, ordinal: ord_b }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub entries: Vec<(TokenId, f64)>,
}

impl TopK {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    /// 1-based position of `token`, if present.
    pub fn position(&self, token: TokenId) -> Option<usize> {
        self.entries.iter().position(|(t, _)| *t == token).map(|p| p + 1)
    }

    pub fn kth_score(&self) -> Option<f64> {
        self.entries.last().map(|(_, s)| *s)
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }

    /// Writes `rank,kind,id,score` rows; `name` maps tokens to external ids.
    pub fn write_csv<W: Write>(&self, mut out: W, name: impl Fn(TokenId) -> String) -> std::io::Result<()> {
        writeln!(out, "rank,kind,id,score")?;
        for (r, (t, s)) in self.entries.iter().enumerate() {
            writeln!(out, "{},{},{},{}", r + 1, t.kind_str(), name(*t), s)?;
        }
        Ok(())
    }

    fn from_heap(heap: BinaryHeap<Reverse<Ranked>>, space: TokenSpace) -> Self {
        let mut ranked: Vec<Ranked> = heap.into_iter().map(|Reverse(r)| r).collect();
        ranked.sort_by(|a, b| b.cmp(a));
        Self {
            entries: ranked
                .into_iter()
                .map(|r| (space.token(r.ordinal).expect("ordinal in range"), r.score))
                .collect(),
        }
    }
}

/// Bounded min-heap keeping the best `k` entries.
struct BestK {
    k: usize,
    heap: BinaryHeap<Reverse<Ranked>>,
}

impl BestK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn push(&mut self, score: f64, ordinal: usize) {
        let r = Ranked { score, ordinal };
        if self.heap.len() < self.k {
            self.heap.push(Reverse(r));
        } else if let Some(Reverse(worst)) = self.heap.peek() {
            if r > *worst {
                self.heap.pop();
                self.heap.push(Reverse(r));
            }
        }
    }

    fn full(&self) -> bool {
        self.heap.len() >= self.k
    }

    fn worst(&self) -> Option<Ranked> {
        self.heap.peek().map(|Reverse(r)| *r)
    }
}

/// Top-`k` of a dense score vector indexed by unified ordinal.
pub fn topk_from_scores(scores: &[f64], k: usize, space: TokenSpace) -> TopK {
    let mut best = BestK::new(k.min(scores.len()));
    if best.k == 0 {
        return TopK::default();
    }
    for (ord, &s) in scores.iter().enumerate() {
        best.push(s, ord);
    }
    TopK::from_heap(best.heap, space)
}

/// Exact top-`k` of the two-level distribution by full enumeration.
pub fn topk_exact<T: Real>(query: &QueryVector, k: usize, tables: &OutputTables<T>, map: &ClusterMap) -> TopK {
    topk_from_scores(&score_all(query, tables, Some(map), SoftmaxMode::TwoLevel), k, tables.space())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StructureStats {
    pub clusters_expanded: usize,
    /// Dot products: every centroid plus every member of an expanded cluster.
    pub tokens_scored: usize,
    /// Largest `log P(c|H)` among clusters left unexpanded.
    pub max_pruned_logprob: Option<f64>,
}

impl StructureStats {
    pub fn clusters_pruned(&self, map: &ClusterMap) -> usize {
        map.n_clusters() - self.clusters_expanded
    }
}

fn clusters_by_bound(level1: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..level1.len()).collect();
    order.sort_by(|&a, &b| level1[b].total_cmp(&level1[a]).then(a.cmp(&b)));
    order
}

/// Exact top-`k` by best-first cluster expansion.
///
/// Clusters are visited in descending `P(c|H)`. Expansion stops once `k`
/// candidates are held and the worst of them scores strictly above the next
/// cluster's bound, so every pruned token scores strictly below the result.
pub fn topk_structure<T: Real>(query: &QueryVector, k: usize, tables: &OutputTables<T>, map: &ClusterMap) -> (TopK, StructureStats) {
    let mut cost = CostCounter::default();
    let level1 = cluster_logprobs(query, tables, map, &mut cost);
    let mut stats = StructureStats::default();
    let mut best = BestK::new(k.min(map.space().len()));
    if best.k == 0 {
        stats.tokens_scored = cost.dots as usize;
        return (TopK::default(), stats);
    }
    for c in clusters_by_bound(&level1) {
        if best.full() && best.worst().is_some_and(|w| w.score > level1[c]) {
            stats.max_pruned_logprob = Some(level1[c]);
            break;
        }
        stats.clusters_expanded += 1;
        let level2 = within_cluster_logprobs(query, tables, map, c, &mut cost);
        for (&ord, lp) in map.members(c).iter().zip(level2) {
            best.push(level1[c] + lp, ord as usize);
        }
    }
    stats.tokens_scored = cost.dots as usize;
    (TopK::from_heap(best.heap, map.space()), stats)
}

/// 1-based rank of `target` under the two-level distribution, expanding only
/// clusters whose bound reaches the target's score.
///
/// Only tokens whose ordinal satisfies `counted` can rank ahead of the target.
pub fn rank_structure<T: Real>(
    query: &QueryVector,
    target: TokenId,
    tables: &OutputTables<T>,
    map: &ClusterMap,
    counted: impl Fn(usize) -> bool,
) -> (usize, StructureStats) {
    let mut cost = CostCounter::default();
    let space = map.space();
    let level1 = cluster_logprobs(query, tables, map, &mut cost);
    let target_ord = space.ordinal(target);
    let target_cluster = map.cluster_of(target);
    let own = within_cluster_logprobs(query, tables, map, target_cluster, &mut cost);
    let pos = map.members(target_cluster).binary_search(&(target_ord as u32)).expect("member");
    let target_score = level1[target_cluster] + own[pos];

    let mut stats = StructureStats::default();
    let mut ahead = 0usize;
    let mut count = |c: usize, level2: &[f64]| {
        for (&ord, lp) in map.members(c).iter().zip(level2) {
            let ord = ord as usize;
            if ord != target_ord && counted(ord) && ranks_ahead(level1[c] + lp, ord, target_score, target_ord) {
                ahead += 1;
            }
        }
    };
    for c in clusters_by_bound(&level1) {
        if level1[c] < target_score {
            stats.max_pruned_logprob = Some(level1[c]);
            break;
        }
        stats.clusters_expanded += 1;
        if c == target_cluster {
            count(c, &own);
        } else {
            let level2 = within_cluster_logprobs(query, tables, map, c, &mut cost);
            count(c, &level2);
        }
    }
    stats.tokens_scored = cost.dots as usize;
    (ahead + 1, stats)
}

/// 1-based rank of `target_ord` in a dense score vector, counting only
/// ordinals accepted by `counted`.
pub fn rank_in_scores(scores: &[f64], target_ord: usize, counted: impl Fn(usize) -> bool) -> usize {
    let s = scores[target_ord];
    1 + (0..scores.len())
        .filter(|&o| o != target_ord && counted(o) && ranks_ahead(scores[o], o, s, target_ord))
        .count()
}

/// Predicate accepting item ordinals only.
pub fn items_only(space: TokenSpace) -> impl Fn(usize) -> bool {
    move |ord| ord >= space.n_text
}

/// Index of `e_c(w) + e_w` for every token, stamped with the table version it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveIndex<T> {
    vectors: EmbeddingTable<T>,
    version: u64,
    space: TokenSpace,
    /// Cluster centroids and members, used by partition probing.
    partition_keys: EmbeddingTable<T>,
    partitions: Vec<Vec<u32>>,
}

impl<T: Real> AdditiveIndex<T> {
    pub fn vectors(&self) -> &EmbeddingTable<T> {
        &self.vectors
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn space(&self) -> TokenSpace {
        self.space
    }

    pub fn ensure_fresh(&self, tables: &OutputTables<T>) -> Result<()> {
        if self.version != tables.version() {
            return Err(Error::StaleIndex {
                index: self.version,
                tables: tables.version(),
            });
        }
        Ok(())
    }

    /// Additive score `⟨o, e_c(w) + e_w⟩` of every token.
    pub fn scores(&self, query: &QueryVector) -> Vec<f64> {
        self.vectors.iter_rows().map(|r| dot_f64(r, query.as_slice())).collect()
    }
}

pub fn build_additive_index<T: Real>(tables: &OutputTables<T>, map: &ClusterMap) -> Result<AdditiveIndex<T>> {
    tables.check_cluster_map(map)?;
    let space = tables.space();
    let mut vectors = EmbeddingTable::zeros(space.len(), tables.dim());
    for ord in 0..space.len() {
        let centroid = tables.centroid(map, map.cluster_of_ordinal(ord));
        let own = tables.embedding_by_ordinal(ord);
        for ((o, c), e) in vectors.row_mut(ord).iter_mut().zip(centroid).zip(own) {
            *o = *c + *e;
        }
    }
    let mut partition_keys = EmbeddingTable::zeros(map.n_clusters(), tables.dim());
    for c in 0..map.n_clusters() {
        partition_keys.row_mut(c).copy_from_slice(tables.centroid(map, c));
    }
    Ok(AdditiveIndex {
        vectors,
        version: tables.version(),
        space,
        partition_keys,
        partitions: (0..map.n_clusters()).map(|c| map.members(c).to_vec()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "search")]
pub enum AnnSearch {
    /// Exact MIPS over every indexed row.
    #[default]
    BruteForce,
    /// Scores only the members of the `n_probe` partitions whose centroid
    /// has the largest inner product with the query.
    Probe { n_probe: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnStats {
    pub tokens_scored: usize,
}

/// Top-`k` by additive inner product. Scores are dot products, not probabilities.
pub fn topk_ann<T: Real>(
    query: &QueryVector,
    k: usize,
    index: &AdditiveIndex<T>,
    tables: &OutputTables<T>,
    search: AnnSearch,
) -> Result<(TopK, AnnStats)> {
    index.ensure_fresh(tables)?;
    match search {
        AnnSearch::BruteForce => Ok((
            topk_from_scores(&index.scores(query), k, index.space),
            AnnStats {
                tokens_scored: index.space.len(),
            },
        )),
        AnnSearch::Probe { n_probe } => {
            let q = query.as_slice();
            let keys: Vec<f64> = index.partition_keys.iter_rows().map(|r| dot_f64(r, q)).collect();
            let mut best = BestK::new(k.min(index.space.len()));
            let mut scored = keys.len();
            for c in clusters_by_bound(&keys).into_iter().take(n_probe.max(1)) {
                for &ord in &index.partitions[c] {
                    best.push(dot_f64(index.vectors.row(ord as usize), q), ord as usize);
                }
                scored += index.partitions[c].len();
            }
            Ok((TopK::from_heap(best.heap, index.space), AnnStats { tokens_scored: scored }))
        }
    }
}

/// Stable subsequence of item entries.
pub fn filter_items(topk: &TopK) -> TopK {
    TopK {
        entries: topk.entries.iter().copied().filter(|(t, _)| t.is_item()).collect(),
    }
}

/// Fetches `k * overfetch` tokens with `fetch`, keeps items, truncates to `k`.
pub fn recommend_items(k: usize, overfetch: usize, fetch: impl FnOnce(usize) -> TopK) -> TopK {
    let mut items = filter_items(&fetch(k.saturating_mul(overfetch.max(1))));
    items.truncate(k);
    items
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{cluster_random, ClusterMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(n_text: usize, n_items: usize, n_clusters: usize, dim: usize, seed: u64) -> (OutputTables<f64>, ClusterMap, QueryVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = EmbeddingTable::uniform(n_text, dim, 1.0, &mut rng);
        let items = EmbeddingTable::uniform(n_items, dim, 1.0, &mut rng);
        let centroids = EmbeddingTable::uniform(n_clusters, dim, 2.0, &mut rng);
        let map = cluster_random(n_text, n_items, n_clusters, seed).unwrap();
        let q = QueryVector::new((0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        (OutputTables::new(text, items, centroids).unwrap(), map, q)
    }

    /// P(c1)=0.6 holding members at 0.4/0.35/0.25, four more clusters at 0.1 each.
    fn two_cluster_example() -> (OutputTables<f64>, ClusterMap, QueryVector) {
        let ln = f64::ln;
        let map = ClusterMap::from_item_assignment(0, &[0, 0, 0, 1, 2, 3, 4], 5).unwrap();
        let mut centroids = vec![vec![ln(0.6)]];
        centroids.extend((0..4).map(|_| vec![ln(0.1)]));
        let items: Vec<Vec<f64>> = [0.4, 0.35, 0.25, 1.0, 1.0, 1.0, 1.0].iter().map(|p| vec![ln(*p)]).collect();
        let tables = OutputTables::new(
            EmbeddingTable::zeros(0, 1),
            EmbeddingTable::from_rows(&items).unwrap(),
            EmbeddingTable::from_rows(&centroids).unwrap(),
        )
        .unwrap();
        (tables, map, QueryVector::new(vec![1.0]).unwrap())
    }

    #[test]
    fn structure_prunes_after_one_cluster() {
        let (tables, map, q) = two_cluster_example();
        let (top, stats) = topk_structure(&q, 1, &tables, &map);
        assert_eq!(top, topk_exact(&q, 1, &tables, &map));
        assert_eq!(top.entries[0].0, TokenId::Item(0));
        assert!((top.entries[0].1.exp() - 0.24).abs() < 1e-12);
        assert_eq!(stats.clusters_expanded, 1);
        assert_eq!(stats.tokens_scored, 5 + 3);
        assert!((stats.max_pruned_logprob.unwrap().exp() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn structure_expands_further_for_larger_k() {
        let (tables, map, q) = two_cluster_example();
        // third best in c1 is 0.15 > 0.1, fourth slot needs the 0.1 clusters
        let (top, stats) = topk_structure(&q, 3, &tables, &map);
        assert_eq!(stats.clusters_expanded, 1);
        assert_eq!(top, topk_exact(&q, 3, &tables, &map));
        let (top, stats) = topk_structure(&q, 4, &tables, &map);
        assert_eq!(top, topk_exact(&q, 4, &tables, &map));
        assert_eq!(stats.clusters_expanded, 5);
    }

    #[test]
    fn singleton_clusters_reduce_to_sorting() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n_items = 12;
        let map = ClusterMap::from_item_assignment(4, &(0..n_items).collect::<Vec<_>>(), n_items).unwrap();
        let tables = OutputTables::<f64>::new(
            EmbeddingTable::uniform(4, 3, 1.0, &mut rng),
            EmbeddingTable::uniform(n_items, 3, 1.0, &mut rng),
            EmbeddingTable::uniform(n_items, 3, 1.0, &mut rng),
        )
        .unwrap();
        let q = QueryVector::new(vec![0.5, -1.0, 2.0]).unwrap();
        for k in [1, 5, 16] {
            assert_eq!(topk_structure(&q, k, &tables, &map).0, topk_exact(&q, k, &tables, &map));
        }
    }

    #[test]
    fn structure_matches_exact_on_random_instances() {
        for seed in 0..200 {
            let (tables, map, q) = instance(30, 400, 20, 6, seed);
            for k in [1, 5, 10, 100] {
                let exact = topk_exact(&q, k, &tables, &map);
                let (s, stats) = topk_structure(&q, k, &tables, &map);
                assert_eq!(s, exact, "seed {seed} k {k}");
                if let Some(b) = stats.max_pruned_logprob {
                    assert!(b <= s.kth_score().unwrap());
                }
            }
        }
    }

    #[test]
    fn exact_matches_independent_sort() {
        let (tables, map, q) = instance(10, 60, 8, 4, 7);
        let scores = score_all(&q, &tables, Some(&map), SoftmaxMode::TwoLevel);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let top = topk_exact(&q, 10, &tables, &map);
        let space = tables.space();
        assert_eq!(top.tokens(), order[..10].iter().map(|&o| space.token(o).unwrap()).collect::<Vec<_>>());
    }

    #[test]
    fn ties_break_by_ordinal() {
        let space = TokenSpace::new(2, 3);
        let top = topk_from_scores(&[0.0, 1.0, 1.0, 0.5, 1.0], 3, space);
        assert_eq!(top.tokens(), vec![TokenId::Text(1), TokenId::Item(0), TokenId::Item(2)]);
    }

    #[test]
    fn rank_structure_matches_enumeration() {
        for seed in 0..30 {
            let (tables, map, q) = instance(15, 120, 11, 4, seed);
            let scores = score_all(&q, &tables, Some(&map), SoftmaxMode::TwoLevel);
            let space = tables.space();
            for ord in (0..space.len()).step_by(7) {
                let tok = space.token(ord).unwrap();
                for items_only in [false, true] {
                    if items_only && !tok.is_item() {
                        continue;
                    }
                    let counted = |o: usize| !items_only || o >= space.n_text;
                    let (r, _) = rank_structure(&q, tok, &tables, &map, counted);
                    assert_eq!(r, rank_in_scores(&scores, ord, counted));
                    // skipping every other ordinal
                    let sparse = |o: usize| counted(o) && o % 2 == 0;
                    assert_eq!(rank_structure(&q, tok, &tables, &map, sparse).0, rank_in_scores(&scores, ord, sparse));
                }
            }
        }
    }

    #[test]
    fn additive_index_rows() {
        let (tables, map, _) = instance(4, 10, 3, 5, 2);
        let index = build_additive_index(&tables, &map).unwrap();
        for ord in 0..tables.space().len() {
            let c = map.cluster_of_ordinal(ord);
            let expect: Vec<f64> = tables
                .centroid(&map, c)
                .iter()
                .zip(tables.embedding_by_ordinal(ord))
                .map(|(a, b)| a + b)
                .collect();
            assert_eq!(index.vectors().row(ord), expect.as_slice());
        }
        // text tokens are their own centroid
        let v = tables.text().row(1);
        let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        assert_eq!(index.vectors().row(1), doubled.as_slice());
    }

    #[test]
    fn zero_centroids_index_equals_token_table() {
        let (mut tables, map, _) = instance(0, 10, 3, 4, 5);
        tables.set_centroids(EmbeddingTable::zeros(3, 4));
        let index = build_additive_index(&tables, &map).unwrap();
        assert_eq!(index.vectors(), tables.items());
    }

    #[test]
    fn stale_index_is_rejected() {
        let (mut tables, map, q) = instance(3, 10, 2, 3, 4);
        let index = build_additive_index(&tables, &map).unwrap();
        assert!(topk_ann(&q, 3, &index, &tables, AnnSearch::BruteForce).is_ok());
        tables.items_mut().row_mut(0)[0] += 1.0;
        assert!(matches!(
            topk_ann(&q, 3, &index, &tables, AnnSearch::BruteForce),
            Err(Error::StaleIndex { .. })
        ));
    }

    #[test]
    fn shared_centroid_makes_ann_match_full_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (dim, n_items) = (4, 30);
        let shared: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map = ClusterMap::from_item_assignment(0, &(0..n_items).map(|i| i % 5).collect::<Vec<_>>(), 5).unwrap();
        let centroids = EmbeddingTable::from_rows(&vec![shared; 5]).unwrap();
        let tables = OutputTables::new(EmbeddingTable::zeros(0, dim), EmbeddingTable::uniform(n_items, dim, 1.0, &mut rng), centroids).unwrap();
        let q = QueryVector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let index = build_additive_index(&tables, &map).unwrap();
        let (ann, _) = topk_ann(&q, n_items, &index, &tables, AnnSearch::BruteForce).unwrap();
        let full = topk_from_scores(&score_all(&q, &tables, None, SoftmaxMode::Full), n_items, tables.space());
        assert_eq!(ann.tokens(), full.tokens());
    }

    #[test]
    fn equal_log_partitions_make_ann_top1_exact() {
        // every cluster holds the same multiset of member logits, so the dropped
        // log-partition term is identical across clusters
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = [0.3, -0.2, 0.9];
        let n_clusters = 4;
        let mut item_rows = Vec::new();
        let mut assignment = Vec::new();
        for c in 0..n_clusters {
            for (m, b) in base.iter().enumerate() {
                item_rows.push(vec![*b, 0.0]);
                assignment.push(c);
                let _ = m;
            }
        }
        let centroids: Vec<Vec<f64>> = (0..n_clusters).map(|_| vec![0.0, rng.gen_range(-2.0..2.0)]).collect();
        let map = ClusterMap::from_item_assignment(0, &assignment, n_clusters).unwrap();
        let tables = OutputTables::new(
            EmbeddingTable::zeros(0, 2),
            EmbeddingTable::from_rows(&item_rows).unwrap(),
            EmbeddingTable::from_rows(&centroids).unwrap(),
        )
        .unwrap();
        // the query must not see the second coordinate of item rows (zero anyway)
        let q = QueryVector::new(vec![1.0, 1.0]).unwrap();
        let index = build_additive_index(&tables, &map).unwrap();
        let (ann, _) = topk_ann(&q, 1, &index, &tables, AnnSearch::BruteForce).unwrap();
        assert_eq!(ann.tokens(), topk_exact(&q, 1, &tables, &map).tokens());
    }

    #[test]
    fn constant_shift_preserves_ann_ordering() {
        let (tables, map, q) = instance(5, 40, 6, 3, 9);
        let index = build_additive_index(&tables, &map).unwrap();
        let scores = index.scores(&q);
        let shifted: Vec<f64> = scores.iter().map(|s| s + 3.25).collect();
        let a = topk_from_scores(&scores, 45, tables.space());
        let b = topk_from_scores(&shifted, 45, tables.space());
        assert_eq!(a.tokens(), b.tokens());
    }

    #[test]
    fn probe_with_all_partitions_equals_brute_force() {
        let (tables, map, q) = instance(5, 50, 7, 3, 10);
        let index = build_additive_index(&tables, &map).unwrap();
        let (a, _) = topk_ann(&q, 10, &index, &tables, AnnSearch::BruteForce).unwrap();
        let (b, stats) = topk_ann(&q, 10, &index, &tables, AnnSearch::Probe { n_probe: map.n_clusters() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(stats.tokens_scored, map.n_clusters() + 55);
        let (c, stats) = topk_ann(&q, 10, &index, &tables, AnnSearch::Probe { n_probe: 2 }).unwrap();
        assert!(c.len() <= 10 && stats.tokens_scored < 55 + map.n_clusters());
    }

    #[test]
    fn filter_keeps_item_order() {
        let t = TopK {
            entries: vec![(TokenId::Text(0), 3.0), (TokenId::Item(4), 2.0), (TokenId::Text(1), 1.5), (TokenId::Item(1), 1.0)],
        };
        assert_eq!(filter_items(&t).tokens(), vec![TokenId::Item(4), TokenId::Item(1)]);
        let all_text = TopK {
            entries: vec![(TokenId::Text(0), 1.0)],
        };
        assert!(filter_items(&all_text).is_empty());
    }

    #[test]
    fn recommend_overfetches_before_truncating() {
        let space = TokenSpace::new(20, 20);
        // text tokens dominate the top of the ranking
        let scores: Vec<f64> = (0..40).map(|o| if o < 20 { 100.0 - o as f64 } else { 50.0 - o as f64 }).collect();
        let mut fetched = 0;
        let recs = recommend_items(10, 4, |n| {
            fetched = n;
            topk_from_scores(&scores, n, space)
        });
        assert_eq!(fetched, 40);
        assert_eq!(recs.len(), 10);
        assert_eq!(recs.entries[0].0, TokenId::Item(0));
        let short = recommend_items(10, 1, |n| topk_from_scores(&scores, n, space));
        assert!(short.is_empty());
    }

    proptest::proptest! {
        #[test]
        fn structure_search_equals_exact(
            n_text in 1usize..30,
            n_items in 1usize..200,
            clusters in 1usize..30,
            dim in 1usize..8,
            k in 1usize..250,
            seed in 0u64..1000,
        ) {
            let (tables, map, q) = instance(n_text, n_items, clusters.min(n_items), dim, seed);
            let (got, stats) = topk_structure(&q, k, &tables, &map);
            proptest::prop_assert_eq!(&got, &topk_exact(&q, k, &tables, &map));
            if let (Some(pruned), Some(kth)) = (stats.max_pruned_logprob, got.kth_score()) {
                proptest::prop_assert!(pruned <= kth);
            }
        }
    }
}
