//! Three-tier payload storage.
//!
//! Tier 1 and tier 2 are bounded, mutually exclusive read caches over a
//! write-through tier 3 ([`ExternalStore`]), which is the source of truth.
//! Lookups go tier 1, tier 2, tier 3. Every tier-3 read issued by one
//! [`TieredVectorStore::get_batch`] call is a single transaction, and fetched
//! payloads land in tier 1. Tier-1 evictions move into tier 2; tier-2
//! evictions are dropped.

pub mod backend;
pub mod disk;
pub mod eviction;
pub mod rendezvous;

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use backend::{
    ns_to_ms, ExternalStore, LatencyModel, SimulatedStore, Transaction, VirtualClock,
};
pub use disk::DiskStore;
pub use eviction::{EvictionKind, EvictionPolicy, Fifo, Lru};

use crate::distance::Embedding;
use crate::error::{Error, Result};
use crate::VectorId;

/// Cache tier capacities, counted in items.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierConfig {
    pub tier1_capacity: usize,
    pub tier2_capacity: usize,
    /// Share of a combined budget assigned to tier 1 by [`TierConfig::from_budget`].
    pub split_ratio: f64,
    pub eviction: EvictionKind,
}

impl Default for TierConfig {
    fn default() -> Self {
        TierConfig {
            tier1_capacity: 1024,
            tier2_capacity: 1024,
            split_ratio: 0.5,
            eviction: EvictionKind::Fifo,
        }
    }
}

impl TierConfig {
    pub fn new(tier1_capacity: usize, tier2_capacity: usize) -> Self {
        TierConfig {
            tier1_capacity,
            tier2_capacity,
            ..TierConfig::default()
        }
    }

    /// Both tiers effectively unbounded.
    pub fn unbounded() -> Self {
        TierConfig::new(usize::MAX / 2, usize::MAX / 2)
    }

    /// Splits a combined item budget between the tiers. Tier 1 always gets at
    /// least one slot when the budget is non-zero.
    pub fn from_budget(budget: usize, split_ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&split_ratio) {
            return Err(Error::invalid(format!(
                "split ratio {split_ratio} outside [0, 1]"
            )));
        }
        let mut t1 = (budget as f64 * split_ratio).round() as usize;
        if budget > 0 {
            t1 = t1.clamp(1, budget);
        }
        Ok(TierConfig {
            tier1_capacity: t1,
            tier2_capacity: budget - t1,
            split_ratio,
            eviction: EvictionKind::Fifo,
        })
    }

    pub fn budget(&self) -> usize {
        self.tier1_capacity.saturating_add(self.tier2_capacity)
    }
}

/// Point-in-time copy of the store counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    /// Tier-3 transactions.
    pub n_db: u64,
    pub items_fetched: u64,
    pub hits_t1: u64,
    pub hits_t2: u64,
    /// Fetched payloads that a search went on to distance-evaluate.
    pub distance_evaluated: u64,
    pub t_db_total_ns: u64,
    pub t1_evictions: u64,
    pub t2_drops: u64,
}

impl StoreStats {
    pub fn delta(&self, earlier: &StoreStats) -> StoreStats {
        StoreStats {
            n_db: self.n_db - earlier.n_db,
            items_fetched: self.items_fetched - earlier.items_fetched,
            hits_t1: self.hits_t1 - earlier.hits_t1,
            hits_t2: self.hits_t2 - earlier.hits_t2,
            distance_evaluated: self.distance_evaluated - earlier.distance_evaluated,
            t_db_total_ns: self.t_db_total_ns - earlier.t_db_total_ns,
            t1_evictions: self.t1_evictions - earlier.t1_evictions,
            t2_drops: self.t2_drops - earlier.t2_drops,
        }
    }
}

#[derive(Default)]
struct AtomicStats {
    n_db: AtomicU64,
    items_fetched: AtomicU64,
    hits_t1: AtomicU64,
    hits_t2: AtomicU64,
    distance_evaluated: AtomicU64,
    t_db_total_ns: AtomicU64,
    t1_evictions: AtomicU64,
    t2_drops: AtomicU64,
}

impl AtomicStats {
    fn snapshot(&self) -> StoreStats {
        StoreStats {
            n_db: self.n_db.load(Ordering::Relaxed),
            items_fetched: self.items_fetched.load(Ordering::Relaxed),
            hits_t1: self.hits_t1.load(Ordering::Relaxed),
            hits_t2: self.hits_t2.load(Ordering::Relaxed),
            distance_evaluated: self.distance_evaluated.load(Ordering::Relaxed),
            t_db_total_ns: self.t_db_total_ns.load(Ordering::Relaxed),
            t1_evictions: self.t1_evictions.load(Ordering::Relaxed),
            t2_drops: self.t2_drops.load(Ordering::Relaxed),
        }
    }

    fn reset(&self) {
        for c in [
            &self.n_db,
            &self.items_fetched,
            &self.hits_t1,
            &self.hits_t2,
            &self.distance_evaluated,
            &self.t_db_total_ns,
            &self.t1_evictions,
            &self.t2_drops,
        ] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// How the redundancy rate is accounted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RedundancyMode {
    /// Share of fetched payloads never distance-evaluated.
    Lazy,
    /// Fixed-size prefetch: `1 - hits / (n_db * prefetch_size)`.
    FixedPrefetch { prefetch_size: usize },
}

/// Redundancy of a fixed-size prefetcher: the share of prefetch slots whose
/// payload was never used.
pub fn redundancy_rate(hits: u64, disk_accesses: u64, prefetch_size: usize) -> Result<f64> {
    if disk_accesses == 0 || prefetch_size == 0 {
        return Err(Error::UndefinedRate);
    }
    Ok(1.0 - hits as f64 / (disk_accesses as f64 * prefetch_size as f64))
}

/// Result of one [`TieredVectorStore::get_batch`] call.
#[derive(Debug, Default)]
pub struct Batch {
    pub payloads: HashMap<VectorId, Embedding>,
    /// Ids served by tier 3, in request order.
    pub fetched: Vec<VectorId>,
    /// Time charged by the tier-3 transaction, zero when none was issued.
    pub tier3_ns: u64,
}

impl Batch {
    pub fn transacted(&self) -> bool {
        !self.fetched.is_empty()
    }
}

struct Tier {
    capacity: usize,
    items: HashMap<VectorId, Embedding>,
    policy: Box<dyn EvictionPolicy>,
}

impl Tier {
    fn new(capacity: usize, policy: Box<dyn EvictionPolicy>) -> Self {
        Tier {
            capacity,
            items: HashMap::new(),
            policy,
        }
    }

    fn insert(&mut self, id: VectorId, p: Embedding) {
        if self.items.insert(id, p).is_none() {
            self.policy.inserted(id);
        }
    }

    fn remove(&mut self, id: VectorId) -> Option<Embedding> {
        let p = self.items.remove(&id)?;
        self.policy.removed(id);
        Some(p)
    }

    /// Pops one victim if over capacity.
    fn overflow(&mut self) -> Option<(VectorId, Embedding)> {
        if self.items.len() <= self.capacity {
            return None;
        }
        let id = self.policy.victim()?;
        let p = self.items.remove(&id)?;
        Some((id, p))
    }

    fn clear(&mut self) {
        self.items.clear();
        self.policy.clear();
    }
}

struct Caches {
    t1: Tier,
    t2: Tier,
}

/// Tier-level counters produced while holding the cache lock.
#[derive(Default)]
struct Moves {
    t1_evictions: u64,
    t2_drops: u64,
}

impl Caches {
    fn lookup(&mut self, id: VectorId, moves: &mut Moves) -> Option<(Embedding, u8)> {
        if let Some(p) = self.t1.items.get(&id) {
            let p = p.clone();
            self.t1.policy.accessed(id);
            return Some((p, 1));
        }
        let p = self.t2.remove(id)?;
        self.admit_t1(id, p.clone(), moves);
        Some((p, 2))
    }

    fn admit_t1(&mut self, id: VectorId, p: Embedding, moves: &mut Moves) {
        if self.t1.items.contains_key(&id) {
            return;
        }
        self.t2.remove(id);
        if self.t1.capacity == 0 {
            self.admit_t2(id, p, moves);
            return;
        }
        self.t1.insert(id, p);
        while let Some((vid, vp)) = self.t1.overflow() {
            moves.t1_evictions += 1;
            self.admit_t2(vid, vp, moves);
        }
    }

    fn admit_t2(&mut self, id: VectorId, p: Embedding, moves: &mut Moves) {
        if self.t2.capacity == 0 {
            moves.t2_drops += 1;
            return;
        }
        self.t2.insert(id, p);
        while self.t2.overflow().is_some() {
            moves.t2_drops += 1;
        }
    }

    fn is_resident(&self, id: VectorId) -> bool {
        self.t1.items.contains_key(&id) || self.t2.items.contains_key(&id)
    }
}

pub struct TieredVectorStore {
    backend: Arc<dyn ExternalStore>,
    config: Mutex<TierConfig>,
    caches: Mutex<Caches>,
    stats: AtomicStats,
}

impl TieredVectorStore {
    pub fn new(backend: Arc<dyn ExternalStore>, config: TierConfig) -> Self {
        Self::with_policies(
            backend,
            config,
            config.eviction.build(),
            config.eviction.build(),
        )
    }

    /// Uses caller-supplied replacement policies for tier 1 and tier 2.
    pub fn with_policies(
        backend: Arc<dyn ExternalStore>,
        config: TierConfig,
        tier1: Box<dyn EvictionPolicy>,
        tier2: Box<dyn EvictionPolicy>,
    ) -> Self {
        TieredVectorStore {
            backend,
            config: Mutex::new(config),
            caches: Mutex::new(Caches {
                t1: Tier::new(config.tier1_capacity, tier1),
                t2: Tier::new(config.tier2_capacity, tier2),
            }),
            stats: AtomicStats::default(),
        }
    }

    pub fn backend(&self) -> &Arc<dyn ExternalStore> {
        &self.backend
    }

    pub fn dimension(&self) -> usize {
        self.backend.dimension()
    }

    pub fn config(&self) -> TierConfig {
        *self.config.lock().unwrap()
    }

    pub fn stats(&self) -> StoreStats {
        self.stats.snapshot()
    }

    pub fn reset_stats(&self) {
        self.stats.reset();
    }

    /// `(tier1 len, tier2 len)`.
    pub fn resident_counts(&self) -> (usize, usize) {
        let c = self.caches.lock().unwrap();
        (c.t1.items.len(), c.t2.items.len())
    }

    fn record(&self, moves: Moves) {
        if moves.t1_evictions > 0 {
            self.stats
                .t1_evictions
                .fetch_add(moves.t1_evictions, Ordering::Relaxed);
        }
        if moves.t2_drops > 0 {
            self.stats.t2_drops.fetch_add(moves.t2_drops, Ordering::Relaxed);
        }
    }

    /// Writes payloads through to tier 3. Caches are not touched.
    pub fn write_through(&self, items: &[(VectorId, Embedding)]) -> Result<()> {
        self.backend.write_batch(items)
    }

    pub fn is_resident(&self, id: VectorId) -> bool {
        self.caches.lock().unwrap().is_resident(id)
    }

    /// Reads a payload only if it is cached, counting the hit.
    pub fn get_resident(&self, id: VectorId) -> Option<Embedding> {
        let mut moves = Moves::default();
        let hit = self.caches.lock().unwrap().lookup(id, &mut moves);
        self.record(moves);
        let (p, tier) = hit?;
        let counter = if tier == 1 {
            &self.stats.hits_t1
        } else {
            &self.stats.hits_t2
        };
        counter.fetch_add(1, Ordering::Relaxed);
        Some(p)
    }

    /// Resolves every id, reading all cache misses from tier 3 in exactly one
    /// transaction. Duplicate ids are served once.
    pub fn get_batch(&self, ids: &[VectorId]) -> Result<Batch> {
        let mut batch = Batch {
            payloads: HashMap::with_capacity(ids.len()),
            ..Batch::default()
        };
        let mut seen = HashSet::with_capacity(ids.len());
        let mut misses = Vec::new();
        let (mut h1, mut h2) = (0u64, 0u64);
        let mut moves = Moves::default();
        {
            let mut caches = self.caches.lock().unwrap();
            for &id in ids {
                if !seen.insert(id) {
                    continue;
                }
                match caches.lookup(id, &mut moves) {
                    Some((p, 1)) => {
                        h1 += 1;
                        batch.payloads.insert(id, p);
                    }
                    Some((p, _)) => {
                        h2 += 1;
                        batch.payloads.insert(id, p);
                    }
                    None => misses.push(id),
                }
            }
        }
        self.stats.hits_t1.fetch_add(h1, Ordering::Relaxed);
        self.stats.hits_t2.fetch_add(h2, Ordering::Relaxed);

        if !misses.is_empty() {
            let tx = self.backend.read_batch(&misses)?;
            if tx.payloads.len() != misses.len() {
                return Err(Error::Storage(format!(
                    "tier 3 returned {} payloads for {} ids",
                    tx.payloads.len(),
                    misses.len()
                )));
            }
            self.stats.n_db.fetch_add(1, Ordering::Relaxed);
            self.stats
                .items_fetched
                .fetch_add(misses.len() as u64, Ordering::Relaxed);
            self.stats
                .t_db_total_ns
                .fetch_add(tx.elapsed_ns, Ordering::Relaxed);
            let mut caches = self.caches.lock().unwrap();
            for (&id, p) in misses.iter().zip(tx.payloads) {
                caches.admit_t1(id, p.clone(), &mut moves);
                batch.payloads.insert(id, p);
            }
            batch.tier3_ns = tx.elapsed_ns;
            batch.fetched = misses;
        }
        self.record(moves);
        Ok(batch)
    }

    /// Accepts a payload evicted from an engine-side tier 1 into tier 2.
    pub fn evict_store(&self, id: VectorId, payload: Embedding) {
        let mut moves = Moves::default();
        {
            let mut c = self.caches.lock().unwrap();
            if c.t1.items.contains_key(&id) {
                return;
            }
            c.admit_t2(id, payload, &mut moves);
        }
        self.record(moves);
    }

    /// Loads payloads into the caches without touching the statistics, for
    /// start-up warm loading.
    pub fn prefill(&self, ids: &[VectorId]) -> Result<()> {
        for chunk in ids.chunks(4096) {
            let tx = self.backend.read_batch(chunk)?;
            let mut moves = Moves::default();
            let mut c = self.caches.lock().unwrap();
            for (&id, p) in chunk.iter().zip(tx.payloads) {
                c.admit_t1(id, p, &mut moves);
            }
        }
        Ok(())
    }

    pub fn clear_caches(&self) {
        let mut c = self.caches.lock().unwrap();
        c.t1.clear();
        c.t2.clear();
    }

    /// Applies new capacities, evicting (tier 1 into tier 2, tier 2 dropped)
    /// until both tiers fit.
    pub fn reconfigure(&self, config: TierConfig) {
        let mut moves = Moves::default();
        {
            let mut c = self.caches.lock().unwrap();
            c.t1.capacity = config.tier1_capacity;
            c.t2.capacity = config.tier2_capacity;
            while let Some((id, p)) = c.t1.overflow() {
                moves.t1_evictions += 1;
                c.admit_t2(id, p, &mut moves);
            }
            while c.t2.overflow().is_some() {
                moves.t2_drops += 1;
            }
        }
        *self.config.lock().unwrap() = config;
        self.record(moves);
    }

    /// Credits `n` fetched payloads as used by a search.
    pub fn record_evaluated(&self, n: u64) {
        self.stats
            .distance_evaluated
            .fetch_add(n, Ordering::Relaxed);
    }

    pub fn redundancy_rate(&self, mode: RedundancyMode) -> Result<f64> {
        let s = self.stats();
        if s.n_db == 0 {
            return Err(Error::UndefinedRate);
        }
        match mode {
            RedundancyMode::Lazy => {
                Ok(1.0 - s.distance_evaluated as f64 / s.items_fetched as f64)
            }
            RedundancyMode::FixedPrefetch { prefetch_size } => {
                redundancy_rate(s.distance_evaluated, s.n_db, prefetch_size)
            }
        }
    }
}
