//! Fetch policies compared by the benchmark harness.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distance::Embedding;
use crate::error::{Error, Result};
use crate::hnsw::{HnswIndex, PayloadSource, SearchHit, SearchParams};
use crate::lazy::{search_lazy, QueryStats, QueryTrace};
use crate::store::{RedundancyMode, TieredVectorStore};
use crate::VectorId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FetchPolicy {
    /// Phased lazy loading.
    Lazy,
    /// One transaction per missing payload.
    OnDemandItem,
    /// On a miss, fetch the item plus graph-nearby missing items up to
    /// `size` payloads per transaction.
    FixedPrefetch { size: usize },
}

impl FetchPolicy {
    pub fn redundancy_mode(&self) -> RedundancyMode {
        match self {
            FetchPolicy::FixedPrefetch { size } => RedundancyMode::FixedPrefetch {
                prefetch_size: *size,
            },
            _ => RedundancyMode::Lazy,
        }
    }

    pub fn run(
        &self,
        index: &HnswIndex,
        store: &TieredVectorStore,
        q: &[f32],
        params: SearchParams,
    ) -> Result<(Vec<SearchHit>, QueryStats)> {
        match *self {
            FetchPolicy::Lazy => search_lazy(index, q, params, store),
            FetchPolicy::OnDemandItem => traced_baseline(index, store, q, params, None),
            FetchPolicy::FixedPrefetch { size } => {
                traced_baseline(index, store, q, params, Some(size.max(1)))
            }
        }
    }
}

impl fmt::Display for FetchPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FetchPolicy::Lazy => f.write_str("lazy"),
            FetchPolicy::OnDemandItem => f.write_str("on-demand-item"),
            FetchPolicy::FixedPrefetch { size } => write!(f, "fixed-prefetch:{size}"),
        }
    }
}

impl FromStr for FetchPolicy {
    type Err = Error;

    /// `lazy`, `on-demand-item`, or `fixed-prefetch[:N]` (default N = 16).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lazy" => Ok(FetchPolicy::Lazy),
            "on-demand-item" | "on-demand" => Ok(FetchPolicy::OnDemandItem),
            "fixed-prefetch" => Ok(FetchPolicy::FixedPrefetch { size: 16 }),
            other => {
                if let Some(n) = other.strip_prefix("fixed-prefetch:") {
                    let size: usize = n
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad prefetch size '{n}'")))?;
                    if size == 0 {
                        return Err(Error::invalid("prefetch size must be >= 1"));
                    }
                    Ok(FetchPolicy::FixedPrefetch { size })
                } else {
                    Err(Error::invalid(format!("unknown policy '{other}'")))
                }
            }
        }
    }
}

struct Traced<'a> {
    index: &'a HnswIndex,
    store: &'a TieredVectorStore,
    trace: QueryTrace,
    prefetch: Option<usize>,
}

impl Traced<'_> {
    /// `id` followed by missing ids in breadth-first order around it.
    fn prefetch_set(&self, id: VectorId, level: usize, size: usize) -> Vec<VectorId> {
        let mut out = vec![id];
        let mut seen = HashSet::from([id]);
        let mut queue = VecDeque::from([id]);
        let mut expanded = 0;
        while let Some(cur) = queue.pop_front() {
            if out.len() >= size || expanded > 64 * size {
                break;
            }
            expanded += 1;
            for nb in self.index.neighbors(cur, level).unwrap_or_default() {
                if !seen.insert(nb) {
                    continue;
                }
                queue.push_back(nb);
                if !self.store.is_resident(nb) {
                    out.push(nb);
                    if out.len() >= size {
                        break;
                    }
                }
            }
        }
        out
    }
}

impl PayloadSource for Traced<'_> {
    fn payload(&mut self, id: VectorId, level: usize) -> Result<Embedding> {
        let slot = self.index.slot(id)?;
        self.trace.visit(slot);
        self.trace.evaluated(slot);
        if let Some(p) = self.store.get_resident(id) {
            return Ok(p);
        }
        let request = match self.prefetch {
            None => vec![id],
            Some(size) => self.prefetch_set(id, level, size),
        };
        let mut batch = self.store.get_batch(&request)?;
        self.trace.transaction(self.index, &batch)?;
        batch.payloads.remove(&id).ok_or(Error::MissingPayload(id))
    }
}

fn traced_baseline(
    index: &HnswIndex,
    store: &TieredVectorStore,
    q: &[f32],
    params: SearchParams,
    prefetch: Option<usize>,
) -> Result<(Vec<SearchHit>, QueryStats)> {
    let mut src = Traced {
        index,
        store,
        trace: QueryTrace::new(index),
        prefetch,
    };
    let hits = index.search(q, params, &mut src)?;
    Ok((hits, src.trace.finish(store)))
}
