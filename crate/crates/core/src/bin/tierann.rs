use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tierann::bench::{
    gaussian_vectors, make_queries, run_sweep, Breakdown, CostModel, Harness, QueryMode,
    SweepConfig,
};
use tierann::bundle::{build_bundle, Bundle};
use tierann::optimizer::{optimize_memory_size, OptimizerParams};
use tierann::{
    Embedding, FetchPolicy, HnswParams, LatencyModel, Metric, SearchHit, SearchParams,
    SimulatedStore, TierConfig, TieredVectorStore,
};

#[derive(Parser)]
#[command(name = "tierann", version, about = "Tiered-storage HNSW search and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian JSONL corpus.
    Synth(SynthArgs),
    /// Build an index bundle from a JSONL corpus.
    Build(BuildArgs),
    /// Run queries against a bundle.
    Query(QueryArgs),
    /// Sweep memory-data ratios and report latency per ratio.
    Sweep(SweepArgs),
    /// Search for the smallest cache budget meeting a latency threshold.
    Optimize(OptimizeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryKind {
    Perturbed,
    Gaussian,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    input: PathBuf,
    /// Snapshot path; vector and text files are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, short = 'm', default_value_t = 16)]
    m: usize,
    #[arg(long, default_value_t = 200)]
    ef_construction: usize,
    #[arg(long, default_value = "cosine")]
    metric: Metric,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    chunk: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, default_value_t = 10.0)]
    t_tx_ms: f64,
    #[arg(long, default_value_t = 0.01)]
    t_item_ms: f64,
    /// Share of the cache budget given to tier 1.
    #[arg(long, default_value_t = 0.5)]
    split_ratio: f64,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 64)]
    ef: usize,
    #[arg(long, default_value = "lazy")]
    policy: FetchPolicy,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct QuerySet {
    /// JSONL file of {"embedding": [...]} records.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Number of generated queries when no file is given.
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, value_enum, default_value_t = QueryKind::Perturbed)]
    query_mode: QueryKind,
    /// Noise level of perturbed queries.
    #[arg(long, default_value_t = 0.5)]
    sigma: f32,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[command(flatten)]
    set: QuerySet,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Tier-1 capacity in items.
    #[arg(long)]
    tier1: Option<usize>,
    /// Tier-2 capacity in items.
    #[arg(long)]
    tier2: Option<usize>,
    /// Total cache budget in bytes, split by --split-ratio.
    #[arg(long, conflicts_with_all = ["tier1", "tier2"])]
    budget_bytes: Option<u64>,
    /// Include stored texts in the output.
    #[arg(long)]
    texts: bool,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,0.9,0.96,0.98,1.0")]
    ratios: Vec<f64>,
    #[command(flatten)]
    set: QuerySet,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    index: PathBuf,
    /// Share of query time storage may take.
    #[arg(long, default_value_t = 0.8)]
    p: f64,
    #[arg(long, default_value_t = 100.0)]
    t_theta_ms: f64,
    /// Starting budget in items; defaults to the whole dataset.
    #[arg(long)]
    c0: Option<usize>,
    #[command(flatten)]
    set: QuerySet,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Deserialize)]
struct QueryRecordIn {
    embedding: Vec<f32>,
}

#[derive(Serialize)]
struct QueryOut {
    query: usize,
    hits: Vec<HitOut>,
    stats: tierann::QueryStats,
    breakdown: Breakdown,
    total_ms: f64,
}

#[derive(Serialize)]
struct HitOut {
    id: u64,
    distance: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

fn read_queries(path: &Path, dim: usize) -> Result<Vec<Embedding>> {
    let reader = BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecordIn = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if rec.embedding.len() != dim {
            bail!(
                "{}:{}: expected {dim} values, got {}",
                path.display(),
                i + 1,
                rec.embedding.len()
            );
        }
        out.push(Embedding::new(rec.embedding)?);
    }
    Ok(out)
}

fn load_queries(set: &QuerySet, bundle: &Bundle, seed: u64) -> Result<Vec<Embedding>> {
    if let Some(path) = &set.queries {
        let q = read_queries(path, bundle.index.dimension())?;
        if q.is_empty() {
            bail!("{} holds no queries", path.display());
        }
        return Ok(q);
    }
    let data: Vec<Embedding> = bundle.payloads()?.into_iter().map(|(_, e)| e).collect();
    let mode = match set.query_mode {
        QueryKind::Perturbed => QueryMode::Perturbed { sigma: set.sigma },
        QueryKind::Gaussian => QueryMode::Gaussian,
    };
    Ok(make_queries(&data, set.count, mode, seed)?)
}

fn simulated(bundle: &Bundle, backend: &BackendArgs, config: TierConfig) -> Result<TieredVectorStore> {
    let model = LatencyModel::new(backend.t_tx_ms, backend.t_item_ms)?;
    let sim = SimulatedStore::copy_from(bundle.vectors.as_ref(), model)?;
    Ok(TieredVectorStore::new(Arc::new(sim), config))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let data = gaussian_vectors(a.n, a.dim, a.seed)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    for (i, v) in data.iter().enumerate() {
        let rec = serde_json::json!({"text": format!("synthetic document {i}"), "embedding": v.as_slice()});
        writeln!(w, "{rec}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_build(a: BuildArgs) -> Result<()> {
    let params = HnswParams {
        m: a.m,
        ef_construction: a.ef_construction,
        metric: a.metric,
        seed: a.seed,
    };
    let report = build_bundle(&a.input, &a.out, params, a.chunk)?;
    let mut out = io::stdout().lock();
    match a.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
        Format::Csv => {
            writeln!(out, "level,nodes")?;
            for (l, n) in report.level_histogram.iter().enumerate() {
                writeln!(out, "{l},{n}")?;
            }
        }
    }
    Ok(())
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let bundle = Bundle::open(&a.index)?;
    let queries = load_queries(&a.set, &bundle, a.search.seed)?;
    let n = bundle.index.len();
    let config = match (a.budget_bytes, a.tier1, a.tier2) {
        (Some(bytes), _, _) => {
            let per_item = (bundle.index.dimension() * 4) as u64;
            TierConfig::from_budget((bytes / per_item) as usize, a.backend.split_ratio)?
        }
        (None, None, None) => TierConfig::from_budget(n, a.backend.split_ratio)?,
        (None, t1, t2) => TierConfig::new(t1.unwrap_or(0), t2.unwrap_or(0)),
    };
    let store = simulated(&bundle, &a.backend, config)?;
    let params = SearchParams::new(a.search.k, a.search.ef)?;
    let cost = CostModel::default();

    let mut out = BufWriter::new(io::stdout().lock());
    let mut rows = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let (hits, stats) = a.search.policy.run(&bundle.index, &store, q, params)?;
        let breakdown = Breakdown::of(&stats, cost);
        let with_text = |h: &SearchHit| -> Result<HitOut> {
            let text = match (&bundle.texts, a.texts) {
                (Some(t), true) => Some(t.get_text(h.id)?),
                _ => None,
            };
            Ok(HitOut {
                id: h.id,
                distance: h.distance,
                text,
            })
        };
        rows.push(QueryOut {
            query: qi,
            hits: hits.iter().map(with_text).collect::<Result<_>>()?,
            stats,
            breakdown,
            total_ms: breakdown.total_ms(),
        });
    }
    match a.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&rows)?)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record([
                "query", "rank", "id", "distance", "n_q", "n_db", "distance_ms", "store_ms",
                "other_ms", "total_ms", "text",
            ])?;
            for r in &rows {
                for (rank, h) in r.hits.iter().enumerate() {
                    w.write_record([
                        r.query.to_string(),
                        (rank + 1).to_string(),
                        h.id.to_string(),
                        h.distance.to_string(),
                        r.stats.n_q.to_string(),
                        r.stats.n_db.to_string(),
                        r.breakdown.distance_ms.to_string(),
                        r.breakdown.store_ms.to_string(),
                        r.breakdown.other_ms.to_string(),
                        r.total_ms.to_string(),
                        h.text.clone().unwrap_or_default(),
                    ])?;
                }
            }
            w.flush()?;
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let bundle = Bundle::open(&a.index)?;
    let queries = load_queries(&a.set, &bundle, a.search.seed)?;
    let config = SweepConfig {
        ratios: a.ratios,
        queries: queries.len(),
        ef: a.search.ef,
        k: a.search.k,
        policy: a.search.policy,
        latency: LatencyModel::new(a.backend.t_tx_ms, a.backend.t_item_ms)?,
        cost: CostModel::default(),
        split_ratio: a.backend.split_ratio,
        seed: a.search.seed,
    };
    config.validate()?;
    let store = simulated(&bundle, &a.backend, TierConfig::default())?;
    let report = run_sweep(&bundle.index, &store, &queries, &config)?;
    let text = match a.format {
        Format::Csv => report.to_csv()?,
        Format::Json => report.to_json()? + "\n",
    };
    match a.out {
        Some(p) => std::fs::write(p, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_optimize(a: OptimizeArgs) -> Result<()> {
    let bundle = Bundle::open(&a.index)?;
    let queries = load_queries(&a.set, &bundle, a.search.seed)?;
    let store = simulated(&bundle, &a.backend, TierConfig::default())?;
    let params = SearchParams::new(a.search.k, a.search.ef)?;
    let mut harness = Harness::new(
        &bundle.index,
        &store,
        &queries,
        params,
        a.search.policy,
        a.search.seed,
    )?;
    harness.split_ratio = a.backend.split_ratio;
    let opt = OptimizerParams {
        p: a.p,
        t_theta_ms: a.t_theta_ms,
        c0: a.c0.unwrap_or(bundle.index.len()),
    };
    let state = optimize_memory_size(opt, || harness.query_test(), |b| harness.apply_budget(b))?;
    let report = state.report();
    let mut out = io::stdout().lock();
    match a.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            for row in &report.rows {
                w.serialize(row)?;
            }
            w.flush()?;
            drop(w);
            eprintln!(
                "c0={} c_best={} saved_items={} saved_pct={:.2}",
                report.c0, report.c_best, report.saved_items, report.saved_pct
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Build(a) => cmd_build(a),
        Command::Query(a) => cmd_query(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Optimize(a) => cmd_optimize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
