//! Tier-3 backends: the authoritative, batch-transactional payload store.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::distance::Embedding;
use crate::error::{Error, Result};
use crate::VectorId;

/// One read transaction's outcome: payloads in request order plus the time
/// the transaction cost, in nanoseconds.
#[derive(Debug)]
pub struct Transaction {
    pub payloads: Vec<Embedding>,
    pub elapsed_ns: u64,
}

/// A store where every `read_batch` call is exactly one transaction.
pub trait ExternalStore: Send + Sync {
    fn dimension(&self) -> usize;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn contains(&self, id: VectorId) -> bool;

    /// All ids in insertion order.
    fn ids(&self) -> Vec<VectorId>;

    /// Reads `ids` in a single transaction. Unknown ids fail the whole
    /// transaction with [`Error::MissingPayload`].
    fn read_batch(&self, ids: &[VectorId]) -> Result<Transaction>;

    /// Appends payloads. Existing ids are rejected.
    fn write_batch(&self, items: &[(VectorId, Embedding)]) -> Result<()>;

    /// Forces buffered writes down to the medium.
    fn flush(&self) -> Result<()> {
        Ok(())
    }
}

/// Affine transaction-cost model: each read costs `t_tx + items * t_item`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub t_tx_ms: f64,
    pub t_item_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            t_tx_ms: 10.0,
            t_item_ms: 0.01,
        }
    }
}

impl LatencyModel {
    pub fn new(t_tx_ms: f64, t_item_ms: f64) -> Result<Self> {
        if !(t_tx_ms >= 0.0 && t_tx_ms.is_finite()) || !(t_item_ms >= 0.0 && t_item_ms.is_finite())
        {
            return Err(Error::invalid("latency model costs must be finite and >= 0"));
        }
        Ok(LatencyModel { t_tx_ms, t_item_ms })
    }

    fn tx_ns(&self) -> u64 {
        ms_to_ns(self.t_tx_ms)
    }

    fn item_ns(&self) -> u64 {
        ms_to_ns(self.t_item_ms)
    }

    /// Cost of one transaction fetching `items` payloads, in nanoseconds.
    pub fn cost_ns(&self, items: usize) -> u64 {
        self.tx_ns() + items as u64 * self.item_ns()
    }
}

pub(crate) fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

pub fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

/// Monotone simulated time in nanoseconds.
#[derive(Clone, Debug, Default)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn now_ns(&self) -> u64 {
        self.now.load(Ordering::Acquire)
    }

    pub fn advance(&self, ns: u64) {
        self.now.fetch_add(ns, Ordering::AcqRel);
    }
}

#[derive(Default)]
struct SimInner {
    payloads: HashMap<VectorId, Embedding>,
    order: Vec<VectorId>,
}

/// In-process tier 3 that charges the affine latency model on a virtual
/// clock instead of sleeping. Deterministic for a given access sequence.
pub struct SimulatedStore {
    dimension: usize,
    model: LatencyModel,
    clock: VirtualClock,
    inner: RwLock<SimInner>,
}

impl SimulatedStore {
    pub fn new(dimension: usize, model: LatencyModel) -> Self {
        SimulatedStore {
            dimension,
            model,
            clock: VirtualClock::default(),
            inner: RwLock::new(SimInner::default()),
        }
    }

    /// Copies every payload out of another store, without charging this
    /// store's clock.
    pub fn copy_from(source: &dyn ExternalStore, model: LatencyModel) -> Result<Self> {
        let store = SimulatedStore::new(source.dimension(), model);
        let ids = source.ids();
        for chunk in ids.chunks(4096) {
            let tx = source.read_batch(chunk)?;
            let items: Vec<_> = chunk.iter().copied().zip(tx.payloads).collect();
            store.write_batch(&items)?;
        }
        Ok(store)
    }

    pub fn model(&self) -> LatencyModel {
        self.model
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }
}

impl ExternalStore for SimulatedStore {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn len(&self) -> usize {
        self.inner.read().unwrap().order.len()
    }

    fn contains(&self, id: VectorId) -> bool {
        self.inner.read().unwrap().payloads.contains_key(&id)
    }

    fn ids(&self) -> Vec<VectorId> {
        self.inner.read().unwrap().order.clone()
    }

    fn read_batch(&self, ids: &[VectorId]) -> Result<Transaction> {
        let inner = self.inner.read().unwrap();
        let payloads = ids
            .iter()
            .map(|id| {
                inner
                    .payloads
                    .get(id)
                    .cloned()
                    .ok_or(Error::MissingPayload(*id))
            })
            .collect::<Result<Vec<_>>>()?;
        let elapsed_ns = self.model.cost_ns(ids.len());
        self.clock.advance(elapsed_ns);
        Ok(Transaction {
            payloads,
            elapsed_ns,
        })
    }

    fn write_batch(&self, items: &[(VectorId, Embedding)]) -> Result<()> {
        let mut inner = self.inner.write().unwrap();
        for (id, v) in items {
            if v.dim() != self.dimension {
                return Err(Error::DimensionMismatch {
                    expected: self.dimension,
                    actual: v.dim(),
                });
            }
            if inner.payloads.contains_key(id) {
                return Err(Error::DuplicateId(*id));
            }
        }
        for (id, v) in items {
            inner.payloads.insert(*id, v.clone());
            inner.order.push(*id);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(x: f32) -> Embedding {
        Embedding::new(vec![x, x]).unwrap()
    }

    #[test]
    fn read_charges_affine_cost() {
        let s = SimulatedStore::new(2, LatencyModel::new(10.0, 0.01).unwrap());
        s.write_batch(&[(1, emb(1.0)), (2, emb(2.0))]).unwrap();
        let tx = s.read_batch(&[1, 2]).unwrap();
        assert_eq!(tx.elapsed_ns, 10_000_000 + 2 * 10_000);
        assert_eq!(s.clock().now_ns(), tx.elapsed_ns);
        assert_eq!(tx.payloads[1].as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn unknown_id_names_the_id() {
        let s = SimulatedStore::new(2, LatencyModel::default());
        s.write_batch(&[(1, emb(1.0))]).unwrap();
        let err = s.read_batch(&[1, 9]).unwrap_err();
        assert!(matches!(err, Error::MissingPayload(9)));
    }

    #[test]
    fn duplicate_and_dimension_checked_before_any_write() {
        let s = SimulatedStore::new(2, LatencyModel::default());
        s.write_batch(&[(1, emb(1.0))]).unwrap();
        assert!(s.write_batch(&[(2, emb(2.0)), (1, emb(1.0))]).is_err());
        assert!(!s.contains(2));
        let bad = Embedding::new(vec![1.0]).unwrap();
        assert!(matches!(
            s.write_batch(&[(3, bad)]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn negative_costs_rejected() {
        assert!(LatencyModel::new(-1.0, 0.0).is_err());
        assert!(LatencyModel::new(1.0, f64::NAN).is_err());
    }
}
