//! Layer search with phased lazy loading.
//!
//! Visited neighbors whose payloads are not cached are not fetched on the
//! spot. They are marked visited and parked in a deferred list `L`, and the
//! search carries on with what is resident. `L` is flushed with one batched
//! tier-3 transaction at two points:
//!
//! * intra-layer: after expanding a candidate, if `|L| > ef`;
//! * inter-layer: when the candidate queue is exhausted with `L` non-empty.
//!
//! Flushed payloads are evaluated and admitted under the usual rule, and the
//! layer search resumes. It returns only once the candidate loop finishes
//! with `L` empty, so every layer hands a fully evaluated entry point down.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hnsw::{Candidate, HnswIndex, ResultSet, SearchHit, SearchParams, Visited};
use crate::store::{Batch, TieredVectorStore};
use crate::VectorId;

/// Per-query counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStats {
    /// Distinct nodes visited across all layers.
    pub n_q: u64,
    /// Tier-3 transactions issued by this query.
    pub n_db: u64,
    pub items_fetched: u64,
    /// Fetched payloads that were distance-evaluated within this query.
    pub evaluated_fetched: u64,
    pub distance_evals: u64,
    /// Tier-3 time charged to this query.
    pub t_db_ns: u64,
    pub intra_flushes: u64,
    pub inter_flushes: u64,
}

impl QueryStats {
    /// Share of this query's fetched payloads that went unused.
    pub fn redundancy(&self) -> Option<f64> {
        (self.items_fetched > 0)
            .then(|| 1.0 - self.evaluated_fetched as f64 / self.items_fetched as f64)
    }
}

/// Bookkeeping shared by every layer search of one query.
pub struct QueryTrace {
    visited_all: Visited,
    evaluated: Visited,
    fetched: Vec<u32>,
    pub stats: QueryStats,
}

impl QueryTrace {
    pub fn new(index: &HnswIndex) -> Self {
        QueryTrace {
            visited_all: Visited::new(index.len()),
            evaluated: Visited::new(index.len()),
            fetched: Vec::new(),
            stats: QueryStats::default(),
        }
    }

    pub(crate) fn visit(&mut self, slot: u32) {
        self.visited_all.insert(slot);
    }

    pub(crate) fn evaluated(&mut self, slot: u32) {
        self.evaluated.insert(slot);
        self.stats.distance_evals += 1;
    }

    pub(crate) fn transaction(&mut self, index: &HnswIndex, batch: &Batch) -> Result<()> {
        if !batch.transacted() {
            return Ok(());
        }
        self.stats.n_db += 1;
        self.stats.items_fetched += batch.fetched.len() as u64;
        self.stats.t_db_ns += batch.tier3_ns;
        for id in &batch.fetched {
            self.fetched.push(index.slot(*id)?);
        }
        Ok(())
    }

    /// Closes the query, crediting used fetches to the store counters.
    pub fn finish(mut self, store: &TieredVectorStore) -> QueryStats {
        self.stats.n_q = self.visited_all.len() as u64;
        self.stats.evaluated_fetched = self
            .fetched
            .iter()
            .filter(|s| self.evaluated.contains(**s))
            .count() as u64;
        store.record_evaluated(self.stats.evaluated_fetched);
        self.stats
    }
}

/// Working sets of one lazy layer search.
pub struct LazySearchState {
    visited: Visited,
    candidates: BinaryHeap<Reverse<Candidate>>,
    results: ResultSet,
    deferred: Vec<u32>,
}

impl LazySearchState {
    fn new(index: &HnswIndex, ef: usize) -> Self {
        LazySearchState {
            visited: Visited::new(index.len()),
            candidates: BinaryHeap::new(),
            results: ResultSet::new(ef),
            deferred: Vec::new(),
        }
    }

    fn admit(&mut self, c: Candidate) {
        if self.results.admits(&c) {
            self.candidates.push(Reverse(c));
            self.results.push(c);
        }
    }
}

/// Makes every id in `ids` cache-resident, fetching the missing ones in at
/// most one transaction.
pub fn ensure_resident(
    index: &HnswIndex,
    ids: &[VectorId],
    store: &TieredVectorStore,
    trace: &mut QueryTrace,
) -> Result<()> {
    let missing: Vec<VectorId> = ids
        .iter()
        .copied()
        .filter(|id| !store.is_resident(*id))
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    let batch = store.get_batch(&missing)?;
    trace.transaction(index, &batch)
}

/// One layer of phased lazy search. All `ep` payloads must be resident.
pub fn search_layer_lazy(
    index: &HnswIndex,
    q: &[f32],
    ep: &[VectorId],
    ef: usize,
    level: usize,
    store: &TieredVectorStore,
    trace: &mut QueryTrace,
) -> Result<Vec<Candidate>> {
    index.check_query(q)?;
    let ef = ef.max(1);
    let mut st = LazySearchState::new(index, ef);

    for &id in ep {
        let slot = index.slot(id)?;
        if !st.visited.insert(slot) {
            continue;
        }
        trace.visit(slot);
        let p = store.get_resident(id).ok_or(Error::NotResident(id))?;
        let c = index.evaluate(q, slot, &p)?;
        trace.evaluated(slot);
        st.candidates.push(Reverse(c));
        if st.results.admits(&c) {
            st.results.push(c);
        }
    }

    loop {
        while let Some(Reverse(c)) = st.candidates.pop() {
            let f = *st.results.furthest().expect("non-empty");
            if c > f {
                break;
            }
            for link in index.links(c.slot, level) {
                if !st.visited.insert(link.slot) {
                    continue;
                }
                trace.visit(link.slot);
                let Some(p) = store.get_resident(index.id_of(link.slot)) else {
                    st.deferred.push(link.slot);
                    continue;
                };
                let e = index.evaluate(q, link.slot, &p)?;
                trace.evaluated(link.slot);
                st.admit(e);
            }
            if st.deferred.len() > ef {
                trace.stats.intra_flushes += 1;
                break;
            }
        }

        if st.deferred.is_empty() {
            break;
        }
        if st.deferred.len() <= ef {
            trace.stats.inter_flushes += 1;
        }
        flush(index, q, store, &mut st, trace)?;
    }
    Ok(st.results.into_sorted())
}

fn flush(
    index: &HnswIndex,
    q: &[f32],
    store: &TieredVectorStore,
    st: &mut LazySearchState,
    trace: &mut QueryTrace,
) -> Result<()> {
    let mut ids: Vec<(VectorId, u32)> = st
        .deferred
        .drain(..)
        .map(|s| (index.id_of(s), s))
        .collect();
    ids.sort_unstable();
    let request: Vec<VectorId> = ids.iter().map(|(id, _)| *id).collect();
    let batch = store.get_batch(&request)?;
    trace.transaction(index, &batch)?;
    for (id, slot) in ids {
        let p = batch.payloads.get(&id).ok_or(Error::MissingPayload(id))?;
        let e = index.evaluate(q, slot, p)?;
        trace.evaluated(slot);
        st.admit(e);
    }
    Ok(())
}

/// Full query: lazy greedy descent with `ef = 1` on the upper levels, then a
/// lazy level-0 search with `params.ef`.
pub fn search_lazy(
    index: &HnswIndex,
    q: &[f32],
    params: SearchParams,
    store: &TieredVectorStore,
) -> Result<(Vec<SearchHit>, QueryStats)> {
    params.validate()?;
    index.check_query(q)?;
    if store.config().tier1_capacity == 0 {
        return Err(Error::invalid("lazy search needs tier1_capacity >= 1"));
    }
    let mut trace = QueryTrace::new(index);
    let Some(entry) = index.entry_point() else {
        return Ok((Vec::new(), trace.finish(store)));
    };
    let mut ep = entry;
    for lc in (1..=index.max_level()).rev() {
        ensure_resident(index, &[ep], store, &mut trace)?;
        ep = search_layer_lazy(index, q, &[ep], 1, lc, store, &mut trace)?[0].id;
    }
    ensure_resident(index, &[ep], store, &mut trace)?;
    let w = search_layer_lazy(index, q, &[ep], params.ef, 0, store, &mut trace)?;
    let hits = w.into_iter().take(params.k).map(SearchHit::from).collect();
    Ok((hits, trace.finish(store)))
}
