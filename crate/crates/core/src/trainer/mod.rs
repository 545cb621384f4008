//! Desk-scale recommender training: a mean-pool + MLP encoder feeding the
//! two-level (or full) softmax head, optimised with SGD.

mod config;
mod encoder;
mod render;

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::TrainConfig;
pub use encoder::{mean_pool, EncoderCache, EncoderGrad, EncoderMlp};
pub use render::{render_example, render_id_only, RenderPolicy, Rendered};

use crate::catalog::{project_items, Catalog, ClusteringKind, LeaveOneOut, ProjectionHead, SequenceExample, Snapshot, Vocab};
use crate::clustering::{init_centroids, ClusterMap};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, Recommender};
use crate::scalar::Real;
use crate::softmax::{nll_and_grad, CostCounter, OutputTables, ParamRow, QueryVector};
use crate::table::EmbeddingTable;
use crate::token::TokenId;

/// Result of encoding one token sequence.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub query: QueryVector,
    pub pooled: Vec<f64>,
    pub cache: Option<EncoderCache>,
}

/// `o_n = MLP(mean of input embeddings)`; without an encoder the mean itself.
pub fn encode<T: Real>(tokens: &[TokenId], tables: &OutputTables<T>, encoder: Option<&EncoderMlp<T>>) -> Result<Encoded> {
    let pooled = mean_pool(tokens.iter().map(|&t| tables.embedding(t)), tables.dim())?;
    let (out, cache) = match encoder {
        Some(enc) => {
            let (o, c) = enc.forward(&pooled);
            (o, Some(c))
        }
        None => (pooled.clone(), None),
    };
    Ok(Encoded {
        query: QueryVector::new(out)?,
        pooled,
        cache,
    })
}

/// Fresh model with seeded random tables and mean-initialised centroids.
pub fn init_model<T: Real>(
    config: &TrainConfig,
    n_text: usize,
    n_items: usize,
    cluster_map: ClusterMap,
    clustering: ClusteringKind,
) -> Result<Snapshot<T>> {
    config.validate()?;
    let space = cluster_map.space();
    if space.n_text != n_text || space.n_items != n_items {
        return Err(Error::DimMismatch {
            expected: n_text + n_items,
            actual: space.len(),
            context: "cluster map vs vocabulary and catalog",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (d, k) = (config.dim, config.item_dim);
    let text = EmbeddingTable::uniform(n_text, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let raw_items = EmbeddingTable::uniform(n_items, k, 1.0 / (k as f64).sqrt(), &mut rng);
    let head = ProjectionHead::random(k, d, &mut rng);
    let projected = project_items(&raw_items, &head)?;
    let centroids = init_centroids(&cluster_map, &projected, &text, config.centroid_init, &mut rng)?;
    let encoder = (config.hidden > 0).then(|| EncoderMlp::random(d, config.hidden, &mut rng));
    Ok(Snapshot {
        text,
        raw_items,
        head,
        centroids,
        cluster_map,
        encoder,
        mode: config.softmax_mode,
        clustering,
    })
}

/// Next-item examples from every train prefix: history `train[..t]`, target `train[t]`.
pub fn training_examples(split: &LeaveOneOut, catalog: &Catalog, max_history: usize) -> Vec<SequenceExample> {
    let mut out = Vec::new();
    for u in &split.users {
        for t in 1..u.train.len() {
            let start = t.saturating_sub(max_history);
            out.push(SequenceExample::new(&u.user, &u.train[start..t], u.train[t], catalog));
        }
    }
    out
}

/// Keeps only the most recent `max_history` history entries.
pub fn truncate_history(examples: &mut [SequenceExample], max_history: usize) {
    for ex in examples {
        let n = ex.history.len();
        if n > max_history {
            ex.history.drain(..n - max_history);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub val_recall_at_10: Option<f64>,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,loss,val_recall@10")?;
    for r in rows {
        match r.val_recall_at_10 {
            Some(v) => writeln!(out, "{},{:.6},{:.6}", r.step, r.loss, v)?,
            None => writeln!(out, "{},{:.6},", r.step, r.loss)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters at the best validation round (or the last step without validation).
    pub snapshot: Snapshot<T>,
    pub log: Vec<MetricRow>,
    pub steps_run: usize,
    pub best_step: usize,
    pub best_val_recall: Option<f64>,
    pub stopped_early: bool,
    /// Mean softmax dot products per example over the run.
    pub mean_dots_per_example: f64,
}

/// Per-example loss and gradient contributions.
struct ExampleGrad {
    loss: f64,
    query: Vec<f64>,
    rows: Vec<(ParamRow, f64)>,
    inputs: Vec<TokenId>,
    d_pooled: Vec<f64>,
    encoder: Option<EncoderGrad>,
    dots: u64,
}

fn example_grad<T: Real>(
    example: &SequenceExample,
    seed: u64,
    data: &TrainData<'_>,
    tables: &OutputTables<T>,
    snap: &Snapshot<T>,
    config: &TrainConfig,
) -> Result<ExampleGrad> {
    let policy = RenderPolicy {
        id_only_fraction: config.id_only_fraction,
        metadata_keep_prob: config.metadata_keep_prob,
    };
    let rendered = render_example(example, data.catalog, data.vocab, policy, &mut ChaCha8Rng::seed_from_u64(seed));
    let enc = encode(&rendered.tokens, tables, snap.encoder.as_ref())?;
    let mut cost = CostCounter::default();
    let g = nll_and_grad(
        &enc.query,
        TokenId::Item(example.target),
        tables,
        Some(&snap.cluster_map),
        snap.mode,
        &mut cost,
    )?;
    let (d_pooled, encoder) = match (&snap.encoder, &enc.cache) {
        (Some(e), Some(cache)) => {
            let mut eg = EncoderGrad::zeros(e);
            let dx = e.backward(cache, &g.d_query, &mut eg);
            (dx, Some(eg))
        }
        _ => (g.d_query.clone(), None),
    };
    Ok(ExampleGrad {
        loss: g.loss,
        query: enc.query.as_slice().to_vec(),
        rows: g.rows,
        inputs: rendered.tokens,
        d_pooled,
        encoder,
        dots: cost.dots,
    })
}

/// Inputs shared by every training step.
pub struct TrainData<'a> {
    pub catalog: &'a Catalog,
    pub vocab: &'a Vocab,
    pub train: &'a [SequenceExample],
    pub validation: &'a [SequenceExample],
}

fn add_into(map: &mut BTreeMap<usize, Vec<f64>>, row: usize, coef: f64, v: &[f64]) {
    let acc = map.entry(row).or_insert_with(|| vec![0.0; v.len()]);
    for (a, x) in acc.iter_mut().zip(v) {
        *a += coef * x;
    }
}

/// Sparse gradient over one batch, in the projected item space.
#[derive(Default)]
struct BatchGrad {
    text: BTreeMap<usize, Vec<f64>>,
    items: BTreeMap<usize, Vec<f64>>,
    centroids: BTreeMap<usize, Vec<f64>>,
    encoder: Option<EncoderGrad>,
    loss: f64,
    dots: u64,
}

impl BatchGrad {
    fn add(&mut self, g: ExampleGrad, scale: f64) {
        for (row, coef) in &g.rows {
            let (map, r) = match *row {
                ParamRow::Text(v) => (&mut self.text, v),
                ParamRow::Item(i) => (&mut self.items, i),
                ParamRow::Centroid(j) => (&mut self.centroids, j),
            };
            add_into(map, r, coef * scale, &g.query);
        }
        let share = scale / g.inputs.len() as f64;
        for t in &g.inputs {
            match *t {
                TokenId::Text(v) => add_into(&mut self.text, v, share, &g.d_pooled),
                TokenId::Item(i) => add_into(&mut self.items, i, share, &g.d_pooled),
            }
        }
        if let Some(eg) = g.encoder {
            let scaled = EncoderGrad {
                w1: eg.w1.iter().map(|v| v * scale).collect(),
                b1: eg.b1.iter().map(|v| v * scale).collect(),
                w2: eg.w2.iter().map(|v| v * scale).collect(),
                b2: eg.b2.iter().map(|v| v * scale).collect(),
            };
            match &mut self.encoder {
                Some(acc) => acc.add(&scaled),
                None => self.encoder = Some(scaled),
            }
        }
        self.loss += g.loss * scale;
        self.dots += g.dots;
    }

    fn norm(&self) -> f64 {
        let rows = [&self.text, &self.items, &self.centroids]
            .into_iter()
            .flat_map(|m| m.values())
            .flatten();
        let enc = self
            .encoder
            .iter()
            .flat_map(|g| g.w1.iter().chain(&g.b1).chain(&g.w2).chain(&g.b2));
        rows.chain(enc).map(|v| v * v).sum::<f64>().sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for m in [&mut self.text, &mut self.items, &mut self.centroids] {
            m.values_mut().flatten().for_each(|v| *v *= factor);
        }
        if let Some(g) = &mut self.encoder {
            for v in [&mut g.w1, &mut g.b1, &mut g.w2, &mut g.b2] {
                v.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }
}

fn sgd_row<T: Real>(row: &mut [T], grad: &[f64], lr: f64, decay: f64) {
    for (p, g) in row.iter_mut().zip(grad) {
        let v = p.to_f64_lossless();
        *p = T::from_f64_lossy(v - lr * g - lr * decay * v);
    }
}

/// Applies one SGD step with decoupled weight decay.
///
/// Embedding rows decay only when they received gradient this step; dense
/// weights (projection and encoder matrices) decay every step.
fn apply_update<T: Real>(snap: &mut Snapshot<T>, grad: &BatchGrad, lr: f64, wd: f64) {
    for (&v, g) in &grad.text {
        sgd_row(snap.text.row_mut(v), g, lr, wd);
    }
    for (&j, g) in &grad.centroids {
        sgd_row(snap.centroids.row_mut(j), g, lr, wd);
    }
    // chain rule through the projection: e_i = W r_i + b
    let (d, k) = (snap.head.output_dim(), snap.head.input_dim());
    let mut d_weight = vec![0.0; d * k];
    let mut d_bias = vec![0.0; d];
    let mut d_raw = Vec::with_capacity(grad.items.len());
    for (&i, g) in &grad.items {
        let raw = snap.raw_items.row(i);
        for (r, gr) in g.iter().enumerate() {
            d_bias[r] += gr;
            let dst = &mut d_weight[r * k..(r + 1) * k];
            for (w, x) in dst.iter_mut().zip(raw) {
                *w += gr * x.to_f64_lossless();
            }
        }
        d_raw.push((i, snap.head.backward_input(g)));
    }
    for (i, g) in d_raw {
        sgd_row(snap.raw_items.row_mut(i), &g, lr, wd);
    }
    sgd_row(snap.head.weight.as_mut_slice(), &d_weight, lr, wd);
    sgd_row(&mut snap.head.bias, &d_bias, lr, 0.0);
    if let (Some(enc), Some(g)) = (snap.encoder.as_mut(), grad.encoder.as_ref()) {
        enc.apply_grad(g, lr);
        enc.scale_weights(1.0 - lr * wd);
    }
}

fn validation_recall<T: Real>(snap: &Snapshot<T>, data: &TrainData<'_>) -> Result<f64> {
    let rec = Recommender::from_snapshot(snap)?;
    Ok(evaluate(&rec, data.validation, data.catalog, data.vocab, &EvalOptions::default())?.recall_at_10)
}

/// Runs SGD from `init` and returns the best parameters seen.
///
/// Each step samples `batch_size` examples with replacement, renders them
/// with the metadata-subsampling policy, and applies the averaged gradient.
/// A non-finite loss aborts with [`Error::Numerical`].
pub fn train<T: Real>(init: Snapshot<T>, data: &TrainData<'_>, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    config.validate()?;
    init.validate()?;
    let mut snap = init;
    let mut log = Vec::new();
    if config.max_steps == 0 || data.train.is_empty() {
        return Ok(TrainOutcome {
            snapshot: snap,
            log,
            steps_run: 0,
            best_step: 0,
            best_val_recall: None,
            stopped_early: false,
            mean_dots_per_example: 0.0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_7a1e);
    let mut best: Option<(f64, usize, Snapshot<T>)> = None;
    let mut stale_rounds = 0;
    let mut stopped_early = false;
    let mut total_dots = 0u64;
    let mut steps_run = 0;
    let scale = 1.0 / config.batch_size as f64;

    for step in 1..=config.max_steps {
        let lr = config.lr_at(step - 1);
        let picks: Vec<(usize, u64)> = (0..config.batch_size)
            .map(|_| (rng.gen_range(0..data.train.len()), rng.gen()))
            .collect();
        let tables = snap.output_tables()?;
        let grads: Vec<ExampleGrad> = picks
            .par_iter()
            .map(|&(idx, seed)| example_grad(&data.train[idx], seed, data, &tables, &snap, config))
            .collect::<Result<_>>()
            .map_err(|e| match e {
                // training tokens are valid by construction, so this is a non-finite query
                Error::InvalidArgument(message) => Error::Numerical { step, message },
                other => other,
            })?;
        let mut batch = BatchGrad::default();
        for g in grads {
            batch.add(g, scale);
        }
        if !batch.loss.is_finite() {
            return Err(Error::Numerical {
                step,
                message: format!("loss became {}", batch.loss),
            });
        }
        total_dots += batch.dots;
        if config.max_grad_norm > 0.0 {
            let norm = batch.norm();
            if norm > config.max_grad_norm {
                batch.scale(config.max_grad_norm / norm);
            }
        }
        apply_update(&mut snap, &batch, lr, config.weight_decay);
        steps_run = step;
        if !snap.all_finite() {
            return Err(Error::Numerical {
                step,
                message: "parameters became non-finite".into(),
            });
        }

        let validate = config.eval_every > 0 && !data.validation.is_empty() && (step % config.eval_every == 0 || step == config.max_steps);
        let val = if validate {
            Some(validation_recall(&snap, data)?)
        } else {
            None
        };
        log.push(MetricRow {
            step,
            loss: batch.loss,
            val_recall_at_10: val,
        });
        if let Some(v) = val {
            log::info!("step {step}: loss {:.4}, val recall@10 {v:.4}", batch.loss);
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, step, snap.clone()));
                stale_rounds = 0;
            } else {
                stale_rounds += 1;
                if config.patience > 0 && stale_rounds >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let examples_seen = (steps_run * config.batch_size) as f64;
    let mean_dots_per_example = total_dots as f64 / examples_seen;
    Ok(match best {
        Some((v, best_step, best_snap)) => TrainOutcome {
            snapshot: best_snap,
            log,
            steps_run,
            best_step,
            best_val_recall: Some(v),
            stopped_early,
            mean_dots_per_example,
        },
        None => TrainOutcome {
            snapshot: snap,
            log,
            steps_run,
            best_step: steps_run,
            best_val_recall: None,
            stopped_early,
            mean_dots_per_example,
        },
    })
}

/// Total loss of a fixed rendered batch, for gradient checks.
pub fn batch_loss<T: Real>(snap: &Snapshot<T>, batch: &[(Vec<TokenId>, usize)]) -> Result<f64> {
    let tables = snap.output_tables()?;
    let mut total = 0.0;
    for (tokens, target) in batch {
        let enc = encode(tokens, &tables, snap.encoder.as_ref())?;
        let mut cost = CostCounter::default();
        total += nll_and_grad(&enc.query, TokenId::Item(*target), &tables, Some(&snap.cluster_map), snap.mode, &mut cost)?.loss;
    }
    Ok(total)
}

/// Dense gradient of [`batch_loss`] for every parameter, in snapshot payload order.
///
/// Exposed so that the composed encoder, projection and softmax gradients can
/// be checked against finite differences.
pub fn batch_gradient<T: Real>(snap: &Snapshot<T>, batch: &[(Vec<TokenId>, usize)]) -> Result<Snapshot<f64>> {
    let tables = snap.output_tables()?;
    let mut acc = BatchGrad::default();
    for (tokens, target) in batch {
        let enc = encode(tokens, &tables, snap.encoder.as_ref())?;
        let mut cost = CostCounter::default();
        let g = nll_and_grad(&enc.query, TokenId::Item(*target), &tables, Some(&snap.cluster_map), snap.mode, &mut cost)?;
        let (d_pooled, encoder) = match (&snap.encoder, &enc.cache) {
            (Some(e), Some(cache)) => {
                let mut eg = EncoderGrad::zeros(e);
                let dx = e.backward(cache, &g.d_query, &mut eg);
                (dx, Some(eg))
            }
            _ => (g.d_query.clone(), None),
        };
        acc.add(
            ExampleGrad {
                loss: g.loss,
                query: enc.query.as_slice().to_vec(),
                rows: g.rows,
                inputs: tokens.clone(),
                d_pooled,
                encoder,
                dots: cost.dots,
            },
            1.0,
        );
    }
    let src: Snapshot<f64> = snap.cast();
    let mut grad = src.clone();
    let wipe = |t: &mut EmbeddingTable<f64>| t.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    wipe(&mut grad.text);
    wipe(&mut grad.raw_items);
    wipe(&mut grad.centroids);
    wipe(&mut grad.head.weight);
    grad.head.bias.iter_mut().for_each(|v| *v = 0.0);
    let k = src.head.input_dim();
    for (&v, g) in &acc.text {
        grad.text.row_mut(v).copy_from_slice(g);
    }
    for (&j, g) in &acc.centroids {
        grad.centroids.row_mut(j).copy_from_slice(g);
    }
    for (&i, g) in &acc.items {
        let raw = src.raw_items.row(i);
        for (r, gr) in g.iter().enumerate() {
            grad.head.bias[r] += gr;
            for c in 0..k {
                grad.head.weight.as_mut_slice()[r * k + c] += gr * raw[c];
            }
        }
        grad.raw_items.row_mut(i).copy_from_slice(&src.head.backward_input(g));
    }
    if let (Some(e), Some(g)) = (grad.encoder.as_mut(), acc.encoder.as_ref()) {
        e.layer1.weight.as_mut_slice().copy_from_slice(&g.w1);
        e.layer1.bias.copy_from_slice(&g.b1);
        e.layer2.weight.as_mut_slice().copy_from_slice(&g.w2);
        e.layer2.bias.copy_from_slice(&g.b2);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{ItemRecord, VocabConfig};
    use crate::clustering::cluster_random;
    use crate::softmax::SoftmaxMode;

    fn setup(mode: SoftmaxMode) -> (Catalog, Vocab, Vec<SequenceExample>, TrainConfig, Snapshot<f64>) {
        let mut cat = Catalog::new();
        for i in 0..30 {
            let mut r = ItemRecord::new(format!("i{i}"));
            r.title = Some(format!("group-{} word-{i}", i % 3));
            r.price = Some(i as f64);
            cat.upsert(r);
        }
        let vocab = Vocab::build(&cat, VocabConfig::default()).unwrap();
        let examples: Vec<SequenceExample> = (0..30)
            .map(|u| SequenceExample::new(format!("u{u}"), &[u % 30, (u + 3) % 30], (u + 6) % 30, &cat))
            .collect();
        let config = TrainConfig {
            dim: 8,
            item_dim: 6,
            hidden: 5,
            batch_size: 8,
            max_steps: 20,
            eval_every: 5,
            softmax_mode: mode,
            learning_rate: 0.5,
            ..Default::default()
        };
        let map = cluster_random(vocab.len(), cat.len(), 5, 0).unwrap();
        let snap = init_model(&config, vocab.len(), cat.len(), map, ClusteringKind::Random).unwrap();
        (cat, vocab, examples, config, snap)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (cat, vocab, ex, mut config, snap) = setup(SoftmaxMode::TwoLevel);
        config.learning_rate = 0.0;
        config.eval_every = 0;
        let data = TrainData {
            catalog: &cat,
            vocab: &vocab,
            train: &ex,
            validation: &ex,
        };
        let out = train(snap.clone(), &data, &config).unwrap();
        assert_eq!(out.steps_run, 20);
        assert_eq!(out.snapshot, snap);
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let (cat, vocab, ex, mut config, snap) = setup(SoftmaxMode::TwoLevel);
        config.max_steps = 0;
        let data = TrainData {
            catalog: &cat,
            vocab: &vocab,
            train: &ex,
            validation: &ex,
        };
        assert_eq!(train(snap.clone(), &data, &config).unwrap().snapshot, snap);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        for mode in [SoftmaxMode::TwoLevel, SoftmaxMode::Full] {
            let (cat, vocab, ex, mut config, snap) = setup(mode);
            config.max_steps = 200;
            config.patience = 0;
            let data = TrainData {
                catalog: &cat,
                vocab: &vocab,
                train: &ex,
                validation: &ex,
            };
            let a = train(snap.clone(), &data, &config).unwrap();
            let b = train(snap.clone(), &data, &config).unwrap();
            assert_eq!(a.log, b.log);
            assert_eq!(a.snapshot, b.snapshot);
            let head: f64 = a.log[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
            let tail: f64 = a.log[180..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
            assert!(tail < head, "{mode:?}: {head} -> {tail}");
        }
    }

    #[test]
    fn nan_loss_aborts() {
        let (cat, vocab, ex, config, mut snap) = setup(SoftmaxMode::TwoLevel);
        snap.centroids.as_mut_slice()[0] = f64::MAX;
        snap.text.as_mut_slice()[0] = f64::MAX;
        let data = TrainData {
            catalog: &cat,
            vocab: &vocab,
            train: &ex,
            validation: &ex,
        };
        let err = train(snap, &data, &config);
        assert!(matches!(err, Err(Error::Numerical { step: 1, .. })), "{err:?}");
    }

    #[test]
    fn metrics_csv() {
        let rows = vec![
            MetricRow {
                step: 1,
                loss: 2.0,
                val_recall_at_10: None,
            },
            MetricRow {
                step: 2,
                loss: 1.5,
                val_recall_at_10: Some(0.25),
            },
        ];
        let mut out = Vec::new();
        write_metrics_csv(&rows, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,loss,val_recall@10\n1,2.000000,\n2,1.500000,0.250000\n");
    }

    fn parameters(s: &mut Snapshot<f64>) -> Vec<&mut [f64]> {
        let mut out = vec![
            s.text.as_mut_slice(),
            s.raw_items.as_mut_slice(),
            s.head.weight.as_mut_slice(),
            s.head.bias.as_mut_slice(),
            s.centroids.as_mut_slice(),
        ];
        if let Some(e) = s.encoder.as_mut() {
            out.push(e.layer1.weight.as_mut_slice());
            out.push(e.layer1.bias.as_mut_slice());
            out.push(e.layer2.weight.as_mut_slice());
            out.push(e.layer2.bias.as_mut_slice());
        }
        out
    }

    #[test]
    fn composed_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let eps = 1e-5;
        for seed in 0..12u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mode = if seed % 3 == 2 { SoftmaxMode::Full } else { SoftmaxMode::TwoLevel };
            let (n_text, n_items) = (7, 15);
            let config = TrainConfig {
                dim: 5,
                item_dim: 4,
                hidden: if seed % 4 == 3 { 0 } else { 6 },
                softmax_mode: mode,
                ..Default::default()
            };
            let map = cluster_random(n_text, n_items, 4, seed).unwrap();
            let mut snap = init_model::<f64>(&config, n_text, n_items, map, ClusteringKind::Random).unwrap();
            for p in parameters(&mut snap) {
                p.iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
            }
            let batch: Vec<(Vec<TokenId>, usize)> = (0..3)
                .map(|_| {
                    let len = rng.gen_range(1..6);
                    let toks = (0..len)
                        .map(|_| match rng.gen_bool(0.5) {
                            true => TokenId::Item(rng.gen_range(0..n_items)),
                            false => TokenId::Text(rng.gen_range(0..n_text)),
                        })
                        .collect();
                    (toks, rng.gen_range(0..n_items))
                })
                .collect();
            let mut grad = batch_gradient(&snap, &batch).unwrap();
            let analytic: Vec<Vec<f64>> = parameters(&mut grad).into_iter().map(|s| s.to_vec()).collect();
            for (t, table) in analytic.iter().enumerate() {
                for (i, &g) in table.iter().enumerate() {
                    let mut plus = snap.clone();
                    parameters(&mut plus)[t][i] += eps;
                    let mut minus = snap.clone();
                    parameters(&mut minus)[t][i] -= eps;
                    let fd = (batch_loss(&plus, &batch).unwrap() - batch_loss(&minus, &batch).unwrap()) / (2.0 * eps);
                    let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "seed {seed} table {t} index {i}: analytic {g} vs numeric {fd}");
                }
            }
        }
    }

    #[test]
    fn history_truncation() {
        let (cat, _, _, _, _) = setup(SoftmaxMode::TwoLevel);
        let mut ex = vec![SequenceExample::new("u", &[1, 2, 3, 4], 5, &cat)];
        truncate_history(&mut ex, 2);
        assert_eq!(ex[0].history_items().collect::<Vec<_>>(), vec![3, 4]);
    }
}
