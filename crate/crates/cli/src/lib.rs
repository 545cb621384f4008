//! Subcommands of the `hsrec` binary, callable in-process.
//!
//! Every command reads its inputs from flags and an optional `key = value`
//! config file (flags win over the file, the file over built-in defaults),
//! writes artifacts under `--out-dir`, and returns a JSON summary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hsrec_core::catalog::{
    ingest_jsonl, load_snapshot, read_snapshot_header, save_snapshot, split_leave_one_out, ClusteringKind, Corpus,
    LeaveOneOut, RawEvent, SequenceExample, Snapshot, Vocab, VocabConfig,
};
use hsrec_core::clustering::{
    cluster_frequency, cluster_kmeans, cluster_random, cooccurrence_features, default_n_clusters, read_feature_csv,
    ClusterMap, ClusterMethod, FeatureConfig,
};
use hsrec_core::eval::{evaluate, popularity_baseline, EvalOptions, MetricReport, Recommender, METRIC_CSV_HEADER};
use hsrec_core::inference::{topk_ann, topk_exact, topk_structure, AnnSearch, Engine};
use hsrec_core::kv::KvConfig;
use hsrec_core::latency::{
    latency_rows, measure_m, write_latency_csv, EncodingSpec, ItemEncoding, LatencyRow, ProfileRegistry,
};
use hsrec_core::synth::{generate, SynthSpec};
use hsrec_core::trainer::{init_model, render_id_only, train, training_examples, truncate_history, write_metrics_csv, TrainConfig, TrainData};
use hsrec_core::{Error, Precision, Real, SoftmaxMode};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "hsrec", version, about = "Item-token recommendation with a two-level softmax")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// key = value config file with optional [section] headers
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 makes every command deterministic
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic interaction log with planted item groups
    Synth(SynthArgs),
    /// Ingest a JSONL log and report dataset statistics
    Ingest(DataArgs),
    /// Partition items into clusters
    Cluster(ClusterArgs),
    /// Train a model and write a snapshot plus a metrics log
    Train(TrainArgs),
    /// Rank the test split and write metric reports
    Eval(EvalArgs),
    /// Analytical prefill/decode latency per item encoding
    Latency(LatencyArgs),
    /// Time the exact, structure and ANN top-K engines
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub stickiness: Option<f64>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Interaction log, one JSON object per line
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub clusters: Option<ClusterMethod>,
    /// Defaults to the ceiling of the square root of the catalog size
    #[arg(long)]
    pub n_clusters: Option<usize>,
    /// k-means on these per-item features (CSV) instead of co-occurrence features
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "cluster_map")]
    pub clusters: Option<ClusterMethod>,
    /// Cluster assignment written by `cluster`
    #[arg(long)]
    pub cluster_map: Option<PathBuf>,
    #[arg(long)]
    pub n_clusters: Option<usize>,
    #[arg(long)]
    pub mode: Option<SoftmaxMode>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Repeat (or comma-separate) to evaluate several snapshots
    #[arg(long, required = true, value_delimiter = ',')]
    pub snapshot: Vec<PathBuf>,
    /// Repeat (or comma-separate) to evaluate several engines
    #[arg(long, value_delimiter = ',')]
    pub engine: Vec<Engine>,
    #[arg(long)]
    pub exclude_history: bool,
    /// ANN search over this many centroid partitions instead of brute force
    #[arg(long)]
    pub n_probe: Option<usize>,
    /// Add the train-popularity ranking as a first row
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    /// Built-in profile name; all profiles when omitted
    #[arg(long)]
    pub profile: Option<String>,
    /// Item encoding compared against the single-token one; all when omitted
    #[arg(long)]
    pub encoder: Option<ItemEncoding>,
    /// Measure tokens per item and history length on this log instead of the calibration specs
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub snapshot: PathBuf,
    /// List length, default 10
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of test-split queries, default 200
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub n_probe: Option<usize>,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("unknown precision `{other}` (expected f32|f64)")),
    }
}

/// Failure of a command, with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn trailer(&self) -> String {
        json!({"error": {"code": self.code, "kind": self.kind, "message": self.message}}).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Io { .. } => (EXIT_DATA, "io"),
            Error::MalformedLine { .. } => (EXIT_DATA, "malformed_line"),
            Error::MissingField { .. } => (EXIT_DATA, "missing_field"),
            Error::EmptyCorpus(_) => (EXIT_DATA, "empty_corpus"),
            Error::DimMismatch { .. } => (EXIT_DATA, "dim_mismatch"),
            Error::Snapshot(_) => (EXIT_DATA, "snapshot"),
            Error::StaleIndex { .. } => (EXIT_DATA, "stale_index"),
            Error::InvalidArgument(_) => (EXIT_USAGE, "invalid_argument"),
            Error::EngineMismatch { .. } => (EXIT_USAGE, "engine_mismatch"),
            Error::Config(_) => (EXIT_USAGE, "config"),
            Error::Numerical { .. } => (EXIT_NUMERICAL, "numerical"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_DATA,
        kind: "io",
        message: format!("io error on {}: {e}", path.display()),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Config file split by section; the top level may hold `seed` and `threads`.
struct RunConfig {
    kv: KvConfig,
}

const SECTIONS: [&str; 5] = ["synth", "cluster", "train", "eval", "bench"];

impl RunConfig {
    fn load(global: &GlobalArgs) -> CliResult<Self> {
        let kv = match &global.config {
            Some(path) => KvConfig::load(path)?,
            None => KvConfig::default(),
        };
        Ok(Self { kv })
    }

    fn section(&mut self, name: &str) -> KvConfig {
        self.kv.section(name)
    }

    /// Drops sections other commands own and rejects anything else left over.
    fn finish(mut self) -> CliResult<()> {
        for s in SECTIONS {
            let _ = self.kv.section(s);
        }
        self.kv.take::<u64>("seed")?;
        self.kv.take::<usize>("threads")?;
        Ok(self.kv.finish()?)
    }

    fn seed(&mut self, flag: Option<u64>) -> CliResult<Option<u64>> {
        let file = self.kv.take::<u64>("seed")?;
        Ok(flag.or(file))
    }

    fn threads(&mut self, flag: Option<usize>) -> CliResult<Option<usize>> {
        let file = self.kv.take::<usize>("threads")?;
        Ok(flag.or(file))
    }

    /// The `[train]` section as a full training config (vocabulary and history
    /// settings are shared by every command that renders examples).
    fn train_config(&mut self, seed: Option<u64>) -> CliResult<TrainConfig> {
        let mut section = self.section("train");
        let mut config = TrainConfig::default();
        config.apply_kv(&mut section)?;
        section.finish()?;
        if let Some(s) = seed {
            config.seed = s;
        }
        Ok(config)
    }
}

/// Parses arguments and runs the command, returning its JSON summary.
pub fn run(cli: Cli) -> CliResult<Value> {
    let mut cfg = RunConfig::load(&cli.global)?;
    let seed = cfg.seed(cli.global.seed)?;
    if let Some(n) = cfg.threads(cli.global.threads)? {
        if n == 0 {
            return Err(CliError::usage("--threads must be positive"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = &cli.global.out_dir;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a, cfg, seed, out),
        Command::Ingest(a) => cmd_ingest(a, cfg, out),
        Command::Cluster(a) => cmd_cluster(a, cfg, seed, out),
        Command::Train(a) => cmd_train(a, cfg, seed, out),
        Command::Eval(a) => cmd_eval(a, cfg, out),
        Command::Latency(a) => cmd_latency(a, cfg, out),
        Command::Bench(a) => cmd_bench(a, cfg, out),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, S>(args: I) -> CliResult<Value>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::usage(e.to_string()))?;
    run(cli)
}

fn cmd_synth(a: SynthArgs, mut cfg: RunConfig, seed: Option<u64>, out: &Path) -> CliResult<Value> {
    let mut section = cfg.section("synth");
    let mut spec = SynthSpec::default();
    section.take_into("n_users", &mut spec.n_users)?;
    section.take_into("n_items", &mut spec.n_items)?;
    section.take_into("n_latent_groups", &mut spec.n_latent_groups)?;
    section.take_into("group_stickiness", &mut spec.group_stickiness)?;
    let mut min_len = *spec.history_len_range.start();
    let mut max_len = *spec.history_len_range.end();
    section.take_into("min_len", &mut min_len)?;
    section.take_into("max_len", &mut max_len)?;
    section.take_into("seed", &mut spec.seed)?;
    section.finish()?;
    cfg.finish()?;

    spec.n_users = a.users.unwrap_or(spec.n_users);
    spec.n_items = a.items.unwrap_or(spec.n_items);
    spec.n_latent_groups = a.groups.unwrap_or(spec.n_latent_groups);
    spec.group_stickiness = a.stickiness.unwrap_or(spec.group_stickiness);
    spec.history_len_range = a.min_len.unwrap_or(min_len)..=a.max_len.unwrap_or(max_len);
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate(&spec)?;

    let events = out.join("interactions.jsonl");
    let mut w = create(&events)?;
    RawEvent::write_jsonl(&data.events, &mut w).map_err(|e| io_err(&events, e))?;
    w.flush().map_err(|e| io_err(&events, e))?;
    let truth = out.join("ground_truth.csv");
    let mut w = create(&truth)?;
    data.write_ground_truth_csv(&mut w).map_err(|e| io_err(&truth, e))?;
    w.flush().map_err(|e| io_err(&truth, e))?;
    Ok(json!({
        "command": "synth",
        "events": events,
        "ground_truth": truth,
        "n_users": spec.n_users,
        "n_items": spec.n_items,
        "n_interactions": data.events.len(),
        "seed": spec.seed,
    }))
}

struct Dataset {
    name: String,
    corpus: Corpus,
    split: LeaveOneOut,
    vocab: Vocab,
}

impl Dataset {
    fn load(path: &Path, vocab_size: usize) -> CliResult<Self> {
        let corpus = ingest_jsonl(path)?;
        let split = split_leave_one_out(&corpus)?;
        if split.users.is_empty() {
            return Err(Error::EmptyCorpus("no user has three or more interactions".into()).into());
        }
        let vocab = Vocab::build(&corpus.catalog, VocabConfig { max_size: vocab_size })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into());
        Ok(Self {
            name,
            corpus,
            split,
            vocab,
        })
    }

    fn n_items(&self) -> usize {
        self.corpus.catalog.len()
    }

    fn test_examples(&self, max_history: usize) -> Vec<SequenceExample> {
        let mut ex = self.split.test_examples(&self.corpus.catalog);
        truncate_history(&mut ex, max_history);
        ex
    }

    fn clusters(&self, method: ClusterMethod, n_clusters: Option<usize>, seed: u64, features: Option<&Path>) -> CliResult<(ClusterMap, ClusteringKind)> {
        let n_items = self.n_items();
        let n = n_clusters.unwrap_or_else(|| default_n_clusters(n_items));
        let n_text = self.vocab.len();
        let map = match method {
            ClusterMethod::Frequency => cluster_frequency(n_text, &self.split.train_counts(n_items), n)?,
            ClusterMethod::Random => cluster_random(n_text, n_items, n, seed)?,
            ClusterMethod::Kmeans => {
                let vectors = match features {
                    Some(p) => read_feature_csv(p, n_items)?,
                    None => cooccurrence_features(
                        n_items,
                        self.split.users.iter().map(|u| u.train.as_slice()),
                        FeatureConfig {
                            seed,
                            ..FeatureConfig::default()
                        },
                    ),
                };
                cluster_kmeans(n_text, &vectors, n, seed)?
            }
        };
        let kind = match (method, features) {
            (ClusterMethod::Kmeans, Some(_)) => ClusteringKind::External,
            (m, _) => m.into(),
        };
        Ok((map, kind))
    }
}

fn cmd_ingest(a: DataArgs, mut cfg: RunConfig, out: &Path) -> CliResult<Value> {
    let train = cfg.train_config(None)?;
    cfg.finish()?;
    let ds = Dataset::load(&a.data, train.vocab_size)?;
    let summary = json!({
        "command": "ingest",
        "dataset": ds.name,
        "stats": ds.corpus.stats(),
        "split": {
            "users": ds.split.users.len(),
            "dropped_users": ds.split.dropped_users,
            "train_events": ds.split.n_train_events(),
        },
        "vocab_size": ds.vocab.len(),
    });
    write_text(&out.join("stats.json"), &pretty(&summary))?;
    Ok(summary)
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s
}

fn cmd_cluster(a: ClusterArgs, mut cfg: RunConfig, seed: Option<u64>, out: &Path) -> CliResult<Value> {
    let mut section = cfg.section("cluster");
    let mut method = ClusterMethod::Kmeans;
    section.take_into("method", &mut method)?;
    let n_clusters_file = section.take::<usize>("n_clusters")?;
    let seed_file = section.take::<u64>("seed")?;
    section.finish()?;
    let train = cfg.train_config(None)?;
    cfg.finish()?;

    let method = a.clusters.unwrap_or(method);
    let seed = seed.or(seed_file).unwrap_or(0);
    let ds = Dataset::load(&a.data, train.vocab_size)?;
    let (map, kind) = ds.clusters(method, a.n_clusters.or(n_clusters_file), seed, a.features.as_deref())?;
    let path = out.join(format!("clusters-{}.csv", kind.as_str()));
    let mut w = create(&path)?;
    map.write_csv(&mut w).map_err(|e| io_err(&path, e))?;
    w.flush().map_err(|e| io_err(&path, e))?;
    let sizes = map.item_cluster_sizes();
    Ok(json!({
        "command": "cluster",
        "clustering": kind.as_str(),
        "cluster_map": path,
        "n_item_clusters": map.n_item_clusters(),
        "min_size": sizes.iter().min(),
        "max_size": sizes.iter().max(),
    }))
}

fn cmd_train(a: TrainArgs, mut cfg: RunConfig, seed: Option<u64>, out: &Path) -> CliResult<Value> {
    let mut section = cfg.section("cluster");
    let mut method = ClusterMethod::Kmeans;
    section.take_into("method", &mut method)?;
    let n_clusters_file = section.take::<usize>("n_clusters")?;
    section.take::<u64>("seed")?;
    section.finish()?;
    let mut config = cfg.train_config(seed)?;
    cfg.finish()?;
    if let Some(m) = a.mode {
        config.softmax_mode = m;
    }
    if let Some(s) = a.steps {
        config.max_steps = s;
    }
    config.validate()?;

    let ds = Dataset::load(&a.data, config.vocab_size)?;
    let (map, kind) = match &a.cluster_map {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let space = hsrec_core::TokenSpace::new(ds.vocab.len(), ds.n_items());
            (ClusterMap::read_csv(&text, space)?, ClusteringKind::External)
        }
        None => ds.clusters(a.clusters.unwrap_or(method), a.n_clusters.or(n_clusters_file), config.seed, None)?,
    };
    match a.precision.unwrap_or(Precision::F32) {
        Precision::F32 => train_with::<f32>(&ds, map, kind, &config, out),
        Precision::F64 => train_with::<f64>(&ds, map, kind, &config, out),
    }
}

fn train_with<T: Real>(ds: &Dataset, map: ClusterMap, kind: ClusteringKind, config: &TrainConfig, out: &Path) -> CliResult<Value> {
    let catalog = &ds.corpus.catalog;
    let init = init_model::<T>(config, ds.vocab.len(), ds.n_items(), map, kind)?;
    let train_ex = training_examples(&ds.split, catalog, config.max_history);
    let mut val = ds.split.validation_examples(catalog);
    truncate_history(&mut val, config.max_history);
    let data = TrainData {
        catalog,
        vocab: &ds.vocab,
        train: &train_ex,
        validation: &val,
    };
    let outcome = train(init, &data, config)?;

    let stem = format!("{}-{}", kind.as_str(), config.softmax_mode.as_str());
    let snap_path = out.join(format!("model-{stem}.hsrc"));
    save_snapshot(&snap_path, &outcome.snapshot)?;
    let log_path = out.join(format!("train-{stem}.csv"));
    let mut w = create(&log_path)?;
    write_metrics_csv(&outcome.log, &mut w).map_err(|e| io_err(&log_path, e))?;
    w.flush().map_err(|e| io_err(&log_path, e))?;
    Ok(json!({
        "command": "train",
        "snapshot": snap_path,
        "metrics": log_path,
        "clustering": kind.as_str(),
        "mode": config.softmax_mode.as_str(),
        "steps_run": outcome.steps_run,
        "best_step": outcome.best_step,
        "best_val_recall@10": outcome.best_val_recall,
        "stopped_early": outcome.stopped_early,
        "mean_dots_per_example": outcome.mean_dots_per_example,
        "storage": outcome.snapshot.storage(),
    }))
}

fn eval_options(cfg: &mut KvConfig) -> CliResult<EvalOptions> {
    let mut opts = EvalOptions::default();
    cfg.take_into("overfetch", &mut opts.overfetch)?;
    cfg.take_into("exclude_history", &mut opts.exclude_history)?;
    if let Some(n) = cfg.take::<usize>("n_probe")? {
        opts.ann_search = AnnSearch::Probe { n_probe: n };
    }
    Ok(opts)
}

fn cmd_eval(a: EvalArgs, mut cfg: RunConfig, out: &Path) -> CliResult<Value> {
    let mut section = cfg.section("eval");
    let mut opts = eval_options(&mut section)?;
    let engines_file = section.take::<String>("engine")?;
    section.finish()?;
    let train = cfg.train_config(None)?;
    cfg.finish()?;
    if a.exclude_history {
        opts.exclude_history = true;
    }
    if let Some(n) = a.n_probe {
        opts.ann_search = AnnSearch::Probe { n_probe: n };
    }
    let engines = if !a.engine.is_empty() {
        a.engine.clone()
    } else if let Some(list) = engines_file {
        list.split(',').map(|s| s.trim().parse()).collect::<Result<_, Error>>()?
    } else {
        vec![Engine::Full]
    };

    let ds = Dataset::load(&a.data, train.vocab_size)?;
    let test = ds.test_examples(train.max_history);
    let mut rows: Vec<(String, String, String, MetricReport)> = Vec::new();
    if a.baseline {
        let counts = ds.split.train_counts(ds.n_items());
        let report = popularity_baseline(&counts, &test, opts.exclude_history);
        rows.push(("popularity".into(), "none".into(), "none".into(), report));
    }
    for path in &a.snapshot {
        let header = read_snapshot_header(path)?;
        let results = match header.precision {
            Precision::F32 => eval_snapshot(&load_snapshot::<f32>(path)?, &ds, &test, &engines, opts)?,
            Precision::F64 => eval_snapshot(&load_snapshot::<f64>(path)?, &ds, &test, &engines, opts)?,
        };
        for (engine, report) in results {
            rows.push((
                engine.as_str().into(),
                header.clustering.as_str().into(),
                header.mode.as_str().into(),
                report,
            ));
        }
    }

    let csv_path = out.join("metrics.csv");
    let mut csv = format!("{METRIC_CSV_HEADER}\n");
    for (engine, clustering, mode, r) in &rows {
        csv.push_str(&r.csv_row(&ds.name, engine, clustering, mode));
        csv.push('\n');
    }
    write_text(&csv_path, &csv)?;
    let json_path = out.join("metrics.json");
    let body = match rows.as_slice() {
        [(_, _, _, only)] => only.to_json() + "\n",
        many => {
            let reports: Vec<&MetricReport> = many.iter().map(|r| &r.3).collect();
            serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n"
        }
    };
    write_text(&json_path, &body)?;
    Ok(json!({
        "command": "eval",
        "metrics_csv": csv_path,
        "metrics_json": json_path,
        "rows": rows.iter().map(|(engine, clustering, mode, r)| json!({
            "engine": engine, "clustering": clustering, "mode": mode, "report": r,
        })).collect::<Vec<_>>(),
    }))
}

fn eval_snapshot<T: Real>(
    snap: &Snapshot<T>,
    ds: &Dataset,
    test: &[SequenceExample],
    engines: &[Engine],
    opts: EvalOptions,
) -> CliResult<Vec<(Engine, MetricReport)>> {
    check_snapshot_fits(snap.space(), ds)?;
    let mut rec = Recommender::from_snapshot(snap)?;
    if engines.contains(&Engine::Ann) && snap.mode == SoftmaxMode::TwoLevel {
        rec.build_index()?;
    }
    engines
        .iter()
        .map(|&engine| {
            let options = EvalOptions { engine, ..opts };
            Ok((engine, evaluate(&rec, test, &ds.corpus.catalog, &ds.vocab, &options)?))
        })
        .collect()
}

fn check_snapshot_fits(space: hsrec_core::TokenSpace, ds: &Dataset) -> CliResult<()> {
    if space.n_text != ds.vocab.len() || space.n_items != ds.n_items() {
        return Err(Error::DimMismatch {
            expected: ds.vocab.len() + ds.n_items(),
            actual: space.len(),
            context: "snapshot token space vs dataset vocabulary and catalog",
        }
        .into());
    }
    Ok(())
}

fn cmd_latency(a: LatencyArgs, mut cfg: RunConfig, out: &Path) -> CliResult<Value> {
    let train = cfg.train_config(None)?;
    cfg.finish()?;
    let registry = ProfileRegistry::<f64>::builtin();
    let profiles: Vec<_> = match &a.profile {
        Some(name) => vec![registry.get(name)?.clone()],
        None => registry.profiles.clone(),
    };
    let wanted = |e: ItemEncoding| e == ItemEncoding::Id || a.encoder.is_none_or(|w| w == e);

    let mut rows: Vec<LatencyRow> = Vec::new();
    match &a.data {
        None => {
            for p in &profiles {
                let single = registry
                    .reference_spec(&p.name, ItemEncoding::Id)
                    .ok_or_else(|| CliError::usage(format!("profile `{}` has no single-token reference", p.name)))?;
                let mut specs = Vec::new();
                for enc in [ItemEncoding::Id, ItemEncoding::Title, ItemEncoding::Category] {
                    if let Some(s) = registry.reference_spec(&p.name, enc).filter(|_| wanted(enc)) {
                        specs.push((enc, s));
                    }
                }
                if let Some(enc) = a.encoder.filter(|e| !specs.iter().any(|(x, _)| x == e)) {
                    return Err(CliError::usage(format!(
                        "profile `{}` has no `{}` reference; pass --data to measure one",
                        p.name,
                        enc.as_str()
                    )));
                }
                rows.extend(latency_rows("reference", p, &single, &specs));
            }
        }
        Some(path) => {
            let ds = Dataset::load(path, train.vocab_size)?;
            let test = ds.test_examples(train.max_history);
            let h_len = test.iter().map(|e| e.history.len()).sum::<usize>() as f64 / test.len() as f64;
            let constant = (ds.vocab.prefix().len() + ds.vocab.suffix().len()) as f64;
            let mut specs = Vec::new();
            for enc in [ItemEncoding::Id, ItemEncoding::Title, ItemEncoding::Category] {
                if !wanted(enc) {
                    continue;
                }
                match measure_m(&ds.corpus.catalog, &ds.vocab, enc) {
                    Ok(counts) => specs.push((enc, EncodingSpec::new(counts.mean, h_len, constant)?)),
                    Err(e) if a.encoder == Some(enc) => return Err(e.into()),
                    Err(_) => {}
                }
            }
            let single = specs[0].1.clone();
            for p in &profiles {
                rows.extend(latency_rows(&ds.name, p, &single, &specs));
            }
        }
    }
    let path = out.join("latency.csv");
    let mut w = create(&path)?;
    write_latency_csv(&rows, &mut w).map_err(|e| io_err(&path, e))?;
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(json!({"command": "latency", "latency_csv": path, "rows": rows}))
}

fn cmd_bench(a: BenchArgs, mut cfg: RunConfig, out: &Path) -> CliResult<Value> {
    let mut section = cfg.section("bench");
    let mut k = 10;
    let mut queries = 200;
    section.take_into("k", &mut k)?;
    section.take_into("queries", &mut queries)?;
    section.finish()?;
    let train = cfg.train_config(None)?;
    cfg.finish()?;
    let k = a.k.unwrap_or(k);
    let queries = a.queries.unwrap_or(queries);
    if k == 0 {
        return Err(CliError::usage("--k must be positive"));
    }
    let ds = Dataset::load(&a.data, train.vocab_size)?;
    let search = match a.n_probe {
        Some(n) => AnnSearch::Probe { n_probe: n },
        None => AnnSearch::BruteForce,
    };
    let header = read_snapshot_header(&a.snapshot)?;
    let rows = match header.precision {
        Precision::F32 => bench_snapshot(&load_snapshot::<f32>(&a.snapshot)?, &ds, k, queries, search, train.max_history)?,
        Precision::F64 => bench_snapshot(&load_snapshot::<f64>(&a.snapshot)?, &ds, k, queries, search, train.max_history)?,
    };
    let path = out.join("bench.csv");
    let mut csv = String::from("engine,k,queries,p50_us,p95_us,mean_tokens_scored,mean_overlap_with_exact\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.1},{:.1},{:.1},{:.4}\n",
            r.engine, k, r.queries, r.p50_us, r.p95_us, r.mean_tokens_scored, r.overlap
        ));
    }
    write_text(&path, &csv)?;
    Ok(json!({
        "command": "bench",
        "bench_csv": path,
        "engines": rows.iter().map(|r| json!({
            "engine": r.engine, "p50_us": r.p50_us, "p95_us": r.p95_us,
            "mean_tokens_scored": r.mean_tokens_scored, "mean_overlap_with_exact": r.overlap,
        })).collect::<Vec<_>>(),
    }))
}

struct BenchRow {
    engine: &'static str,
    queries: usize,
    p50_us: f64,
    p95_us: f64,
    mean_tokens_scored: f64,
    /// Fraction of the exact top-K recovered.
    overlap: f64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

fn bench_snapshot<T: Real>(
    snap: &Snapshot<T>,
    ds: &Dataset,
    k: usize,
    n_queries: usize,
    search: AnnSearch,
    max_history: usize,
) -> CliResult<Vec<BenchRow>> {
    if snap.mode != SoftmaxMode::TwoLevel {
        return Err(Error::EngineMismatch {
            engine: "structure".into(),
            mode: snap.mode.as_str().into(),
        }
        .into());
    }
    check_snapshot_fits(snap.space(), ds)?;
    let mut rec = Recommender::from_snapshot(snap)?;
    rec.build_index()?;
    let test = ds.test_examples(max_history);
    let queries = test
        .iter()
        .take(n_queries)
        .map(|ex| rec.query(&render_id_only(ex, &ds.corpus.catalog, &ds.vocab)))
        .collect::<Result<Vec<_>, Error>>()?;
    let index = rec.index().expect("built above");
    let total_tokens = rec.space().len() as f64;

    let mut times = [Vec::new(), Vec::new(), Vec::new()];
    let mut scored = [0.0f64; 3];
    let mut overlap = [0.0f64; 3];
    for q in &queries {
        let t = Instant::now();
        let exact = topk_exact(q, k, &rec.tables, &rec.cluster_map);
        times[0].push(t.elapsed().as_secs_f64() * 1e6);
        scored[0] += total_tokens;
        overlap[0] += 1.0;

        let t = Instant::now();
        let (structure, stats) = topk_structure(q, k, &rec.tables, &rec.cluster_map);
        times[1].push(t.elapsed().as_secs_f64() * 1e6);
        scored[1] += stats.tokens_scored as f64;
        overlap[1] += shared(&exact.tokens(), &structure.tokens(), k);

        let t = Instant::now();
        let (ann, stats) = topk_ann(q, k, index, &rec.tables, search)?;
        times[2].push(t.elapsed().as_secs_f64() * 1e6);
        scored[2] += stats.tokens_scored as f64;
        overlap[2] += shared(&exact.tokens(), &ann.tokens(), k);
    }
    let n = queries.len().max(1) as f64;
    Ok(["exact", "structure", "ann"]
        .into_iter()
        .enumerate()
        .map(|(i, engine)| {
            let mut t = std::mem::take(&mut times[i]);
            t.sort_by(f64::total_cmp);
            BenchRow {
                engine,
                queries: queries.len(),
                p50_us: percentile(&t, 0.5),
                p95_us: percentile(&t, 0.95),
                mean_tokens_scored: scored[i] / n,
                overlap: overlap[i] / n,
            }
        })
        .collect())
}

fn shared(a: &[hsrec_core::TokenId], b: &[hsrec_core::TokenId], k: usize) -> f64 {
    let hits = b.iter().filter(|t| a.contains(t)).count();
    hits as f64 / k.min(a.len()).max(1) as f64
}
