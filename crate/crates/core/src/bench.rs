//! Desk-scale benchmark harness: synthetic data, memory-ratio sweeps and the
//! workload the budget optimizer probes.
//!
//! Latencies are simulated. Each query costs its tier-3 time from the virtual
//! clock plus fixed charges per distance evaluation and per visited node, so
//! every number is a pure function of seed and configuration.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distance::{Embedding, Metric};
use crate::error::{Error, Result};
use crate::hnsw::{HnswIndex, PayloadSource, SearchHit, SearchParams};
use crate::lazy::QueryStats;
use crate::optimizer::QueryTestReport;
use crate::policy::FetchPolicy;
use crate::store::{ns_to_ms, LatencyModel, TierConfig, TieredVectorStore};
use crate::VectorId;

/// How query vectors are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum QueryMode {
    /// A random dataset vector plus isotropic noise of this standard deviation.
    Perturbed { sigma: f32 },
    /// Fresh standard normal vectors.
    Gaussian,
}

impl Default for QueryMode {
    fn default() -> Self {
        QueryMode::Perturbed { sigma: 0.5 }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// `n` standard normal vectors of dimension `dim`.
pub fn gaussian_vectors(n: usize, dim: usize, seed: u64) -> Result<Vec<Embedding>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Embedding::new(gaussian(&mut rng, dim))).collect()
}

pub fn make_queries(
    data: &[Embedding],
    count: usize,
    mode: QueryMode,
    seed: u64,
) -> Result<Vec<Embedding>> {
    let dim = data.first().map_or(0, |e| e.dim());
    if dim == 0 {
        return Err(Error::invalid("query generation needs a non-empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| match mode {
            QueryMode::Gaussian => Embedding::new(gaussian(&mut rng, dim)),
            QueryMode::Perturbed { sigma } => {
                let base = &data[rng.gen_range(0..data.len())];
                let v = base
                    .iter()
                    .map(|x| x + sigma * rng.sample::<f32, _>(StandardNormal))
                    .collect();
                Embedding::new(v)
            }
        })
        .collect()
}

/// Exact top-`k` ids by linear scan, ties broken by smaller id.
pub fn brute_force_knn(
    data: &[(VectorId, Embedding)],
    q: &[f32],
    k: usize,
    metric: Metric,
) -> Result<Vec<SearchHit>> {
    let mut all = Vec::with_capacity(data.len());
    for (id, v) in data {
        all.push(SearchHit {
            id: *id,
            distance: metric.distance(q, v)?,
        });
    }
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
    all.truncate(k);
    Ok(all)
}

/// Share of `truth` ids present in `found`.
pub fn recall(found: &[SearchHit], truth: &[SearchHit]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hit = truth
        .iter()
        .filter(|t| found.iter().any(|f| f.id == t.id))
        .count();
    hit as f64 / truth.len() as f64
}

/// Nearest-rank percentile of `values`; `pct` in (0, 100].
pub fn percentile(values: &[f64], pct: f64) -> Option<f64> {
    if values.is_empty() || !(pct > 0.0 && pct <= 100.0) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

/// Compute charges added to the simulated storage time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub t_dist_ms: f64,
    pub t_visit_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            t_dist_ms: 0.0005,
            t_visit_ms: 0.0001,
        }
    }
}

/// Simulated time of one query, split by category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub distance_ms: f64,
    pub store_ms: f64,
    pub other_ms: f64,
}

impl Breakdown {
    pub fn of(stats: &QueryStats, cost: CostModel) -> Self {
        Breakdown {
            distance_ms: stats.distance_evals as f64 * cost.t_dist_ms,
            store_ms: ns_to_ms(stats.t_db_ns),
            other_ms: stats.n_q as f64 * cost.t_visit_ms,
        }
    }

    pub fn total_ms(&self) -> f64 {
        self.distance_ms + self.store_ms + self.other_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    pub queries: usize,
    pub ef: usize,
    pub k: usize,
    pub policy: FetchPolicy,
    pub latency: LatencyModel,
    pub cost: CostModel,
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ratios: vec![0.2, 0.5, 0.9, 0.96, 0.98, 1.0],
            queries: 100,
            ef: 64,
            k: 10,
            policy: FetchPolicy::Lazy,
            latency: LatencyModel::default(),
            cost: CostModel::default(),
            split_ratio: 0.5,
            seed: 7,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(Error::invalid("at least one ratio is required"));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::invalid(format!("ratio {r} outside (0, 1]")));
        }
        if self.queries == 0 {
            return Err(Error::invalid("queries must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err(Error::invalid("split ratio outside [0, 1]"));
        }
        SearchParams::new(self.k, self.ef).map(|_| ())
    }

    pub fn search_params(&self) -> SearchParams {
        SearchParams {
            k: self.k,
            ef: self.ef,
        }
    }
}

/// One timed query.
#[derive(Clone, Debug)]
pub struct QueryRecord {
    pub hits: Vec<SearchHit>,
    pub stats: QueryStats,
    pub breakdown: Breakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub budget: usize,
    pub policy: String,
    pub queries: usize,
    pub mean_ms: f64,
    pub p99_ms: f64,
    pub mean_n_db: f64,
    /// Standard error of `mean_n_db`.
    pub se_n_db: f64,
    pub mean_n_q: f64,
    /// Empty when no payload was fetched.
    pub redundancy: Option<f64>,
    pub distance_ms: f64,
    pub store_ms: f64,
    pub other_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<SweepRow>,
}

impl BenchReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)
                .map_err(|e| Error::Storage(format!("csv: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// A fixed index, store and query set measured under changing cache budgets.
///
/// Cache contents for budget `b` are the first `b` ids of one seeded
/// permutation, so smaller budgets hold subsets of larger ones.
pub struct Harness<'a> {
    pub index: &'a HnswIndex,
    pub store: &'a TieredVectorStore,
    pub queries: &'a [Embedding],
    pub params: SearchParams,
    pub policy: FetchPolicy,
    pub cost: CostModel,
    pub split_ratio: f64,
    fill_order: Vec<VectorId>,
}

impl<'a> Harness<'a> {
    pub fn new(
        index: &'a HnswIndex,
        store: &'a TieredVectorStore,
        queries: &'a [Embedding],
        params: SearchParams,
        policy: FetchPolicy,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        if queries.is_empty() {
            return Err(Error::invalid("harness needs at least one query"));
        }
        let mut fill_order = index.ids().to_vec();
        fill_order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Harness {
            index,
            store,
            queries,
            params,
            policy,
            cost: CostModel::default(),
            split_ratio: 0.5,
            fill_order,
        })
    }

    pub fn budget_for(&self, ratio: f64) -> usize {
        ((ratio * self.index.len() as f64).ceil() as usize).clamp(1, self.index.len().max(1))
    }

    /// Sizes the caches to `budget`, refills them and runs one warm-up query.
    pub fn apply_budget(&self, budget: usize) -> Result<()> {
        if budget == 0 {
            return Err(Error::invalid("cache budget must be >= 1"));
        }
        let config = TierConfig::from_budget(budget, self.split_ratio)?;
        self.store.clear_caches();
        self.store.reconfigure(config);
        let n = budget.min(self.fill_order.len());
        self.store.prefill(&self.fill_order[..n])?;
        self.policy
            .run(self.index, self.store, &self.queries[0], self.params)?;
        self.store.reset_stats();
        Ok(())
    }

    pub fn run_query(&self, q: &[f32]) -> Result<QueryRecord> {
        let (hits, stats) = self.policy.run(self.index, self.store, q, self.params)?;
        Ok(QueryRecord {
            hits,
            stats,
            breakdown: Breakdown::of(&stats, self.cost),
        })
    }

    /// Runs every query in order at the current budget.
    pub fn run_all(&self) -> Result<Vec<QueryRecord>> {
        self.queries.iter().map(|q| self.run_query(q)).collect()
    }

    pub fn summarize(&self, ratio: f64, budget: usize, records: &[QueryRecord]) -> SweepRow {
        let n = records.len().max(1) as f64;
        let totals: Vec<f64> = records.iter().map(|r| r.breakdown.total_ms()).collect();
        let n_db: Vec<f64> = records.iter().map(|r| r.stats.n_db as f64).collect();
        let mean_n_db = n_db.iter().sum::<f64>() / n;
        let var = n_db.iter().map(|x| (x - mean_n_db).powi(2)).sum::<f64>()
            / (n - 1.0).max(1.0);
        let sum = |f: fn(&QueryRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        SweepRow {
            ratio,
            budget,
            policy: self.policy.to_string(),
            queries: records.len(),
            mean_ms: totals.iter().sum::<f64>() / n,
            p99_ms: percentile(&totals, 99.0).unwrap_or(0.0),
            mean_n_db,
            se_n_db: (var / n).sqrt(),
            mean_n_q: sum(|r| r.stats.n_q as f64),
            redundancy: self.store.redundancy_rate(self.policy.redundancy_mode()).ok(),
            distance_ms: sum(|r| r.breakdown.distance_ms),
            store_ms: sum(|r| r.breakdown.store_ms),
            other_ms: sum(|r| r.breakdown.other_ms),
        }
    }

    pub fn run_ratio(&self, ratio: f64) -> Result<(SweepRow, Vec<QueryRecord>)> {
        let budget = self.budget_for(ratio);
        self.apply_budget(budget)?;
        let records = self.run_all()?;
        Ok((self.summarize(ratio, budget, &records), records))
    }

    /// Workload measurement for the budget optimizer at the applied budget.
    pub fn query_test(&self) -> Result<QueryTestReport> {
        let records = self.run_all()?;
        let n = records.len() as f64;
        let total_db: u64 = records.iter().map(|r| r.stats.n_db).sum();
        let total_db_ns: u64 = records.iter().map(|r| r.stats.t_db_ns).sum();
        let t_db_ms = if total_db > 0 {
            ns_to_ms(total_db_ns) / total_db as f64
        } else {
            self.calibrate_transaction()?
        };
        let totals: Vec<f64> = records.iter().map(|r| r.breakdown.total_ms()).collect();
        Ok(QueryTestReport {
            n_db: total_db as f64 / n,
            n_q: records.iter().map(|r| r.stats.n_q as f64).sum::<f64>() / n,
            t_query_ms: totals.iter().sum::<f64>() / n,
            t_db_ms,
            p99_ms: percentile(&totals, 99.0).unwrap_or(0.0),
        })
    }

    /// Times one single-item transaction when the workload issued none.
    fn calibrate_transaction(&self) -> Result<f64> {
        let id = *self
            .fill_order
            .first()
            .ok_or_else(|| Error::invalid("empty index"))?;
        let tx = self.store.backend().read_batch(&[id])?;
        Ok(ns_to_ms(tx.elapsed_ns))
    }
}

/// Sweeps `config.ratios` in order. Each ratio starts from cleared caches.
pub fn run_sweep(
    index: &HnswIndex,
    store: &TieredVectorStore,
    queries: &[Embedding],
    config: &SweepConfig,
) -> Result<BenchReport> {
    config.validate()?;
    let mut h = Harness::new(
        index,
        store,
        queries,
        config.search_params(),
        config.policy,
        config.seed,
    )?;
    h.cost = config.cost;
    h.split_ratio = config.split_ratio;
    let mut rows = Vec::with_capacity(config.ratios.len());
    for &r in &config.ratios {
        rows.push(h.run_ratio(r)?.0);
    }
    Ok(BenchReport { rows })
}

/// Payload source over an in-memory id-indexed table, for exact baselines.
pub struct InMemory<'a>(pub &'a [(VectorId, Embedding)]);

impl PayloadSource for InMemory<'_> {
    fn payload(&mut self, id: VectorId, _level: usize) -> Result<Embedding> {
        self.0
            .get(id as usize)
            .filter(|(i, _)| *i == id)
            .map(|(_, e)| e.clone())
            .ok_or(Error::MissingPayload(id))
    }
}
