//! Rendezvous between a synchronous search engine and a storage backend that
//! completes requests asynchronously.
//!
//! The engine calls [`request_batch`], which sets a pending [`Signal`] and
//! hands the backend a [`Completer`]. The engine then suspends on the signal:
//! natively by blocking on a condition variable ([`Signal::wait`]), or, when it
//! shares one event loop with the backend, by awaiting the signal as a future
//! so the loop keeps running. Either way it resumes exactly once, after the
//! backend has published the payloads or a failure reason. A backend that
//! drops its completer fails the request instead of leaving it pending.

use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Condvar, Mutex};
use std::task::{Context, Poll, Waker};
use std::thread;
use std::time::{Duration, Instant};

use super::backend::{ExternalStore, Transaction};
use crate::distance::Embedding;
use crate::error::{Error, Result};
use crate::VectorId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SignalState {
    Pending,
    Completed,
    Failed(String),
}

enum Slot<T> {
    Pending,
    Completed(T),
    Failed(String),
    Taken,
}

struct Shared<T> {
    slot: Mutex<SlotAndWaker<T>>,
    cv: Condvar,
}

struct SlotAndWaker<T> {
    slot: Slot<T>,
    waker: Option<Waker>,
    polls: usize,
}

/// Engine-side half of a request.
pub struct Signal<T> {
    shared: Arc<Shared<T>>,
}

/// Backend-side half. Consumed by the single state transition.
pub struct Completer<T> {
    shared: Option<Arc<Shared<T>>>,
}

pub fn signal<T>() -> (Signal<T>, Completer<T>) {
    let shared = Arc::new(Shared {
        slot: Mutex::new(SlotAndWaker {
            slot: Slot::Pending,
            waker: None,
            polls: 0,
        }),
        cv: Condvar::new(),
    });
    (
        Signal {
            shared: shared.clone(),
        },
        Completer {
            shared: Some(shared),
        },
    )
}

impl<T> Completer<T> {
    fn finish(mut self, slot: Slot<T>) {
        let shared = self.shared.take().expect("completer used once");
        let waker = {
            let mut g = shared.slot.lock().unwrap();
            g.slot = slot;
            g.waker.take()
        };
        shared.cv.notify_all();
        if let Some(w) = waker {
            w.wake();
        }
    }

    pub fn complete(self, value: T) {
        self.finish(Slot::Completed(value));
    }

    pub fn fail(self, reason: impl Into<String>) {
        self.finish(Slot::Failed(reason.into()));
    }
}

impl<T> Drop for Completer<T> {
    fn drop(&mut self) {
        if let Some(shared) = self.shared.take() {
            let waker = {
                let mut g = shared.slot.lock().unwrap();
                g.slot = Slot::Failed("backend dropped the request".into());
                g.waker.take()
            };
            shared.cv.notify_all();
            if let Some(w) = waker {
                w.wake();
            }
        }
    }
}

impl<T> Signal<T> {
    pub fn state(&self) -> SignalState {
        match &self.shared.slot.lock().unwrap().slot {
            Slot::Pending => SignalState::Pending,
            Slot::Completed(_) | Slot::Taken => SignalState::Completed,
            Slot::Failed(r) => SignalState::Failed(r.clone()),
        }
    }

    /// Number of times the engine checked the signal.
    pub fn polls(&self) -> usize {
        self.shared.slot.lock().unwrap().polls
    }

    fn take(g: &mut SlotAndWaker<T>) -> Option<Result<T>> {
        match std::mem::replace(&mut g.slot, Slot::Taken) {
            Slot::Pending => {
                g.slot = Slot::Pending;
                None
            }
            Slot::Completed(v) => Some(Ok(v)),
            Slot::Failed(r) => Some(Err(Error::Storage(r))),
            Slot::Taken => Some(Err(Error::Storage("signal already consumed".into()))),
        }
    }

    /// Blocks the calling thread until the backend resolves the request.
    /// Returns the payload together with the number of checks performed.
    pub fn wait(self) -> (Result<T>, usize) {
        let mut g = self.shared.slot.lock().unwrap();
        loop {
            g.polls += 1;
            if let Some(r) = Self::take(&mut g) {
                return (r, g.polls);
            }
            g = self.shared.cv.wait(g).unwrap();
        }
    }
}

impl<T> Future for Signal<T> {
    type Output = Result<T>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let mut g = self.shared.slot.lock().unwrap();
        g.polls += 1;
        match Self::take(&mut g) {
            Some(r) => Poll::Ready(r),
            None => {
                g.waker = Some(cx.waker().clone());
                Poll::Pending
            }
        }
    }
}

/// A storage backend that resolves batch reads out of band.
pub trait AsyncBackend: Send + Sync {
    fn dimension(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn contains(&self, id: VectorId) -> bool;
    fn ids(&self) -> Vec<VectorId>;

    /// Starts one batch read. Must eventually call exactly one of
    /// `done.complete` or `done.fail` (dropping `done` counts as failure).
    fn submit(&self, ids: Vec<VectorId>, done: Completer<Vec<Embedding>>);

    fn write_batch(&self, items: &[(VectorId, Embedding)]) -> Result<()>;
}

/// Sets a pending signal and submits the batch to the backend.
pub fn request_batch<B: AsyncBackend + ?Sized>(
    backend: &B,
    ids: Vec<VectorId>,
) -> Signal<Vec<Embedding>> {
    let (sig, done) = signal();
    backend.submit(ids, done);
    sig
}

/// Suspends until `sig` resolves. Blocks without spinning.
pub fn await_completion(sig: Signal<Vec<Embedding>>) -> Result<Vec<Embedding>> {
    sig.wait().0
}

/// Adapts an [`AsyncBackend`] into a blocking tier-3 [`ExternalStore`].
pub struct BridgedStore<B> {
    backend: B,
}

impl<B: AsyncBackend> BridgedStore<B> {
    pub fn new(backend: B) -> Self {
        BridgedStore { backend }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }
}

impl<B: AsyncBackend> ExternalStore for BridgedStore<B> {
    fn dimension(&self) -> usize {
        self.backend.dimension()
    }

    fn len(&self) -> usize {
        self.backend.len()
    }

    fn contains(&self, id: VectorId) -> bool {
        self.backend.contains(id)
    }

    fn ids(&self) -> Vec<VectorId> {
        self.backend.ids()
    }

    fn read_batch(&self, ids: &[VectorId]) -> Result<Transaction> {
        let start = Instant::now();
        let payloads = await_completion(request_batch(&self.backend, ids.to_vec()))?;
        if payloads.len() != ids.len() {
            return Err(Error::Storage(format!(
                "backend returned {} payloads for {} ids",
                payloads.len(),
                ids.len()
            )));
        }
        Ok(Transaction {
            payloads,
            elapsed_ns: start.elapsed().as_nanos() as u64,
        })
    }

    fn write_batch(&self, items: &[(VectorId, Embedding)]) -> Result<()> {
        self.backend.write_batch(items)
    }
}

/// Serves reads from an inner store on a worker thread after a fixed delay.
pub struct ThreadedBackend<S> {
    inner: Arc<S>,
    delay: Duration,
}

impl<S: ExternalStore + 'static> ThreadedBackend<S> {
    pub fn new(inner: Arc<S>, delay: Duration) -> Self {
        ThreadedBackend { inner, delay }
    }
}

impl<S: ExternalStore + 'static> AsyncBackend for ThreadedBackend<S> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn contains(&self, id: VectorId) -> bool {
        self.inner.contains(id)
    }

    fn ids(&self) -> Vec<VectorId> {
        self.inner.ids()
    }

    fn submit(&self, ids: Vec<VectorId>, done: Completer<Vec<Embedding>>) {
        let inner = self.inner.clone();
        let delay = self.delay;
        thread::spawn(move || {
            if !delay.is_zero() {
                thread::sleep(delay);
            }
            match inner.read_batch(&ids) {
                Ok(tx) => done.complete(tx.payloads),
                Err(e) => done.fail(e.to_string()),
            }
        });
    }

    fn write_batch(&self, items: &[(VectorId, Embedding)]) -> Result<()> {
        self.inner.write_batch(items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_before_first_poll() {
        let (sig, done) = signal::<u32>();
        done.complete(7);
        assert_eq!(sig.state(), SignalState::Completed);
        let (v, polls) = sig.wait();
        assert_eq!(v.unwrap(), 7);
        assert_eq!(polls, 1);
    }

    #[test]
    fn failure_surfaces_as_storage_error() {
        let (sig, done) = signal::<u32>();
        done.fail("disk on fire");
        assert_eq!(sig.state(), SignalState::Failed("disk on fire".into()));
        match sig.wait().0 {
            Err(Error::Storage(r)) => assert_eq!(r, "disk on fire"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dropped_completer_does_not_hang() {
        let (sig, done) = signal::<u32>();
        thread::spawn(move || drop(done)).join().unwrap();
        assert!(matches!(sig.wait().0, Err(Error::Storage(_))));
    }
}
