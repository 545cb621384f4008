//! Full-catalog ranking metrics for leave-one-out evaluation.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, SequenceExample, Snapshot, Vocab};
use crate::clustering::ClusterMap;
use crate::error::{Error, Result};
use crate::inference::{
    build_additive_index, rank_in_scores, rank_structure, recommend_items, topk_ann, topk_structure, AdditiveIndex,
    AnnSearch, Engine,
};
use crate::scalar::Real;
use crate::softmax::{score_all, OutputTables, QueryVector, SoftmaxMode};
use crate::token::{TokenId, TokenSpace};
use crate::trainer::{encode, render_id_only, EncoderMlp};

/// Everything needed to score a query against a fixed model.
#[derive(Debug, Clone)]
pub struct Recommender<T> {
    pub tables: OutputTables<T>,
    pub cluster_map: ClusterMap,
    pub encoder: Option<EncoderMlp<T>>,
    pub mode: SoftmaxMode,
    index: Option<AdditiveIndex<T>>,
}

impl<T: Real> Recommender<T> {
    pub fn new(tables: OutputTables<T>, cluster_map: ClusterMap, encoder: Option<EncoderMlp<T>>, mode: SoftmaxMode) -> Result<Self> {
        tables.check_cluster_map(&cluster_map)?;
        Ok(Self {
            tables,
            cluster_map,
            encoder,
            mode,
            index: None,
        })
    }

    pub fn from_snapshot(snap: &Snapshot<T>) -> Result<Self> {
        Self::new(snap.output_tables()?, snap.cluster_map.clone(), snap.encoder.clone(), snap.mode)
    }

    pub fn space(&self) -> TokenSpace {
        self.tables.space()
    }

    pub fn query(&self, tokens: &[TokenId]) -> Result<QueryVector> {
        Ok(encode(tokens, &self.tables, self.encoder.as_ref())?.query)
    }

    /// Builds (or rebuilds) the additive index for ANN search.
    pub fn build_index(&mut self) -> Result<&AdditiveIndex<T>> {
        self.index = Some(build_additive_index(&self.tables, &self.cluster_map)?);
        Ok(self.index.as_ref().expect("just built"))
    }

    pub fn index(&self) -> Option<&AdditiveIndex<T>> {
        self.index.as_ref()
    }

    /// Fails if `engine` cannot be used with this model.
    pub fn check_engine(&self, engine: Engine) -> Result<()> {
        let ok = match engine {
            Engine::Full => true,
            Engine::Structure | Engine::Ann => self.mode == SoftmaxMode::TwoLevel,
        };
        if !ok {
            return Err(Error::EngineMismatch {
                engine: engine.as_str().into(),
                mode: self.mode.as_str().into(),
            });
        }
        if engine == Engine::Ann {
            match &self.index {
                None => return Err(Error::InvalidArgument("ann engine requires a built index".into())),
                Some(ix) => ix.ensure_fresh(&self.tables)?,
            }
        }
        Ok(())
    }

    /// Dense log-probabilities under the trained softmax mode.
    pub fn score_all(&self, query: &QueryVector) -> Vec<f64> {
        score_all(query, &self.tables, Some(&self.cluster_map), self.mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub engine: Engine,
    /// Multiplier on `K` before filtering text tokens out of fast-engine results.
    pub overfetch: usize,
    /// Drop the user's history items from the candidate ranking.
    pub exclude_history: bool,
    pub ann_search: AnnSearch,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            engine: Engine::Full,
            overfetch: 4,
            exclude_history: false,
            ann_search: AnnSearch::BruteForce,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "recall@1")]
    pub recall_at_1: f64,
    #[serde(rename = "recall@10")]
    pub recall_at_10: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg_at_10: f64,
    pub mrr: f64,
    pub n_users: usize,
}

pub const METRIC_CSV_HEADER: &str = "dataset,engine,clustering,mode,recall@1,recall@10,ndcg@10,mrr,n_users";

impl MetricReport {
    /// Averages per-user 1-based item ranks.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len();
        let mut r1 = 0.0;
        let mut r10 = 0.0;
        let mut ndcg = 0.0;
        let mut mrr = 0.0;
        for &r in ranks {
            debug_assert!(r >= 1);
            if r == 1 {
                r1 += 1.0;
            }
            if r <= 10 {
                r10 += 1.0;
                ndcg += 1.0 / ((r + 1) as f64).log2();
            }
            mrr += 1.0 / r as f64;
        }
        let avg = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
        Self {
            recall_at_1: avg(r1),
            recall_at_10: avg(r10),
            ndcg_at_10: avg(ndcg),
            mrr: avg(mrr),
            n_users: n,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }

    pub fn csv_row(&self, dataset: &str, engine: &str, clustering: &str, mode: &str) -> String {
        format!(
            "{dataset},{engine},{clustering},{mode},{:.6},{:.6},{:.6},{:.6},{}",
            self.recall_at_1, self.recall_at_10, self.ndcg_at_10, self.mrr, self.n_users
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W, dataset: &str, engine: &str, clustering: &str, mode: &str) -> std::io::Result<()> {
        writeln!(out, "{METRIC_CSV_HEADER}")?;
        writeln!(out, "{}", self.csv_row(dataset, engine, clustering, mode))
    }
}

/// 1-based rank of `target` among the item tokens accepted by `keep`, under `engine`.
pub fn item_rank<T: Real>(
    rec: &Recommender<T>,
    query: &QueryVector,
    target: usize,
    keep: &(dyn Fn(usize) -> bool + Sync),
    options: &EvalOptions,
) -> Result<usize> {
    let space = rec.space();
    let target_ord = space.ordinal(TokenId::Item(target));
    let counted = |ord: usize| ord >= space.n_text && keep(ord - space.n_text);
    match options.engine {
        Engine::Full => Ok(rank_in_scores(&rec.score_all(query), target_ord, counted)),
        Engine::Structure => {
            if !options.exclude_history {
                let list = recommend_items(10, options.overfetch, |n| topk_structure(query, n, &rec.tables, &rec.cluster_map).0);
                if let Some(pos) = list.position(TokenId::Item(target)) {
                    return Ok(pos);
                }
            }
            Ok(rank_structure(query, TokenId::Item(target), &rec.tables, &rec.cluster_map, counted).0)
        }
        Engine::Ann => {
            let index = rec
                .index
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("ann engine requires a built index".into()))?;
            let mut list_len = 0;
            if !options.exclude_history {
                let (list, _) = topk_ann(query, 10 * options.overfetch.max(1), index, &rec.tables, options.ann_search)?;
                let mut items = crate::inference::filter_items(&list);
                items.truncate(10);
                if let Some(pos) = items.position(TokenId::Item(target)) {
                    return Ok(pos);
                }
                list_len = items.len();
            }
            let full = rank_in_scores(&index.scores(query), target_ord, counted);
            Ok(full.max(list_len + 1))
        }
    }
}

/// Ranks every example's target and averages the metrics.
pub fn evaluate<T: Real>(
    rec: &Recommender<T>,
    examples: &[SequenceExample],
    catalog: &Catalog,
    vocab: &Vocab,
    options: &EvalOptions,
) -> Result<MetricReport> {
    rec.check_engine(options.engine)?;
    let ranks: Vec<usize> = examples
        .par_iter()
        .map(|ex| {
            let query = rec.query(&render_id_only(ex, catalog, vocab))?;
            if options.exclude_history {
                let seen: HashSet<usize> = ex.history_items().filter(|&i| i != ex.target).collect();
                item_rank(rec, &query, ex.target, &|i| !seen.contains(&i), options)
            } else {
                item_rank(rec, &query, ex.target, &|_| true, options)
            }
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport::from_ranks(&ranks))
}

/// Ranks items by train-split popularity (ties by item index), independent of the user.
pub fn popularity_baseline(train_counts: &[u64], examples: &[SequenceExample], exclude_history: bool) -> MetricReport {
    let scores: Vec<f64> = train_counts.iter().map(|&c| c as f64).collect();
    let ranks: Vec<usize> = examples
        .iter()
        .map(|ex| {
            if exclude_history {
                let seen: HashSet<usize> = ex.history_items().filter(|&i| i != ex.target).collect();
                rank_in_scores(&scores, ex.target, |i| !seen.contains(&i))
            } else {
                rank_in_scores(&scores, ex.target, |_| true)
            }
        })
        .collect();
    MetricReport::from_ranks(&ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{ItemRecord, ProjectionHead, VocabConfig};
    use crate::clustering::cluster_random;
    use crate::table::EmbeddingTable;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_ranks_give_unit_metrics() {
        let m = MetricReport::from_ranks(&[1, 1, 1]);
        assert_eq!((m.recall_at_1, m.recall_at_10, m.ndcg_at_10, m.mrr), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn metric_formulas() {
        let m = MetricReport::from_ranks(&[1, 3, 11]);
        assert!((m.recall_at_10 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.ndcg_at_10 - (1.0 + 0.5) / 3.0).abs() < 1e-15);
        assert!((m.mrr - (1.0 + 1.0 / 3.0 + 1.0 / 11.0) / 3.0).abs() < 1e-15);
        assert!(m.recall_at_1 <= m.mrr && m.recall_at_1 <= m.recall_at_10);
    }

    #[test]
    fn random_scorer_recall_matches_expectation() {
        // uniformly random scores put the target in the top 10 with probability 10/n
        let n_items = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 20_000;
        let ranks: Vec<usize> = (0..trials)
            .map(|_| {
                let scores: Vec<f64> = (0..n_items).map(|_| rng.gen()).collect();
                rank_in_scores(&scores, rng.gen_range(0..n_items), |_| true)
            })
            .collect();
        let m = MetricReport::from_ranks(&ranks);
        let p = 10.0 / n_items as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((m.recall_at_10 - p).abs() <= 4.0 * sigma, "{}", m.recall_at_10);
    }

    #[test]
    fn popularity_ranks() {
        let counts = [5, 9, 9, 1];
        let cat = {
            let mut c = Catalog::new();
            for k in ["a", "b", "c", "d"] {
                c.upsert(ItemRecord::new(k));
            }
            c
        };
        let ex = |target| SequenceExample::new("u", &[1], target, &cat);
        assert_eq!(popularity_baseline(&counts, &[ex(1)], false).recall_at_1, 1.0);
        assert_eq!(popularity_baseline(&counts, &[ex(2)], false).mrr, 0.5);
        // excluding the history item 1 lifts item 2 to the top
        assert_eq!(popularity_baseline(&counts, &[ex(2)], true).mrr, 1.0);
        assert_eq!(popularity_baseline(&counts, &[ex(3)], false).mrr, 0.25);
    }

    fn model(seed: u64) -> (Recommender<f64>, Catalog, Vocab, Vec<SequenceExample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cat = Catalog::new();
        for i in 0..60 {
            let mut r = ItemRecord::new(format!("i{i}"));
            r.title = Some(format!("thing {}", i % 7));
            cat.upsert(r);
        }
        let vocab = Vocab::build(&cat, VocabConfig::default()).unwrap();
        let d = 6;
        let map = cluster_random(vocab.len(), cat.len(), 8, seed).unwrap();
        let snap = Snapshot {
            text: EmbeddingTable::uniform(vocab.len(), d, 1.0, &mut rng),
            raw_items: EmbeddingTable::uniform(cat.len(), 5, 1.0, &mut rng),
            head: ProjectionHead::random(5, d, &mut rng),
            centroids: EmbeddingTable::uniform(8, d, 1.0, &mut rng),
            cluster_map: map,
            encoder: Some(EncoderMlp::random(d, 7, &mut rng)),
            mode: SoftmaxMode::TwoLevel,
            clustering: crate::catalog::ClusteringKind::Random,
        };
        let examples = (0..40)
            .map(|u| {
                let hist: Vec<usize> = (0..4).map(|_| rng.gen_range(0..60)).collect();
                SequenceExample::new(format!("u{u}"), &hist, rng.gen_range(0..60), &cat)
            })
            .collect();
        (Recommender::from_snapshot(&snap).unwrap(), cat, vocab, examples)
    }

    #[test]
    fn structure_engine_equals_enumeration() {
        for seed in 0..5 {
            let (rec, cat, vocab, examples) = model(seed);
            for exclude_history in [false, true] {
                let full = evaluate(
                    &rec,
                    &examples,
                    &cat,
                    &vocab,
                    &EvalOptions {
                        exclude_history,
                        ..Default::default()
                    },
                )
                .unwrap();
                let structure = evaluate(
                    &rec,
                    &examples,
                    &cat,
                    &vocab,
                    &EvalOptions {
                        engine: Engine::Structure,
                        exclude_history,
                        ..Default::default()
                    },
                )
                .unwrap();
                assert_eq!(full, structure);
            }
        }
    }

    #[test]
    fn engine_checks() {
        let (mut rec, cat, vocab, examples) = model(1);
        let ann = EvalOptions {
            engine: Engine::Ann,
            ..Default::default()
        };
        assert!(evaluate(&rec, &examples, &cat, &vocab, &ann).is_err());
        rec.build_index().unwrap();
        let m = evaluate(&rec, &examples, &cat, &vocab, &ann).unwrap();
        assert_eq!(m.n_users, 40);
        rec.tables.items_mut().row_mut(0)[0] += 1.0;
        assert!(matches!(evaluate(&rec, &examples, &cat, &vocab, &ann), Err(Error::StaleIndex { .. })));
        rec.mode = SoftmaxMode::Full;
        let structure = EvalOptions {
            engine: Engine::Structure,
            ..Default::default()
        };
        assert!(matches!(
            evaluate(&rec, &examples, &cat, &vocab, &structure),
            Err(Error::EngineMismatch { .. })
        ));
    }

    #[test]
    fn csv_layout() {
        let m = MetricReport::from_ranks(&[1, 2]);
        let mut out = Vec::new();
        m.write_csv(&mut out, "synth", "full", "kmeans", "twolevel").unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with(METRIC_CSV_HEADER));
        assert!(text.contains("synth,full,kmeans,twolevel,0.500000,1.000000"));
        assert!(m.to_json().contains("\"recall@10\": 1.0"));
    }
}
