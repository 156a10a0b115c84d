//! C ABI over the tierann engine.
//!
//! Every function returns a `TANN_*` status code. On failure a message is kept
//! per thread and can be copied out with [`tann_last_error`]. Handles are
//! opaque; each `*_open` has a matching `*_free`.
//!
//! # Safety
//!
//! Pointers passed in must be valid for the documented lengths. A handle must
//! not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use tierann::bundle::Bundle;
use tierann::store::rendezvous::{AsyncBackend, BridgedStore, Completer};
use tierann::store::{ExternalStore, EvictionKind};
use tierann::{
    Embedding, Error, FetchPolicy, HnswIndex, LatencyModel, SearchParams, SimulatedStore,
    TierConfig, TieredVectorStore, VectorId,
};

pub const TANN_OK: i32 = 0;
pub const TANN_NULL_ARGUMENT: i32 = 1;
pub const TANN_INVALID_ARGUMENT: i32 = 2;
pub const TANN_IO: i32 = 3;
pub const TANN_FORMAT: i32 = 4;
pub const TANN_INTEGRITY: i32 = 5;
pub const TANN_NOT_FOUND: i32 = 6;
pub const TANN_DIMENSION: i32 = 7;
pub const TANN_STORAGE: i32 = 8;
pub const TANN_BUFFER_TOO_SMALL: i32 = 9;
pub const TANN_PANIC: i32 = 10;

/// Tier-3 backend used by [`tann_index_open`].
pub const TANN_BACKEND_SIMULATED: u32 = 0;
pub const TANN_BACKEND_DISK: u32 = 1;

pub const TANN_POLICY_LAZY: u32 = 0;
pub const TANN_POLICY_ON_DEMAND: u32 = 1;
pub const TANN_POLICY_FIXED_PREFETCH: u32 = 2;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn code_of(e: &Error) -> i32 {
    match e {
        Error::InvalidParam(_) | Error::ZeroNorm | Error::NonFinite(_) => TANN_INVALID_ARGUMENT,
        Error::DimensionMismatch { .. } => TANN_DIMENSION,
        Error::Io(_) => TANN_IO,
        Error::Format(_) => TANN_FORMAT,
        Error::Integrity(_) => TANN_INTEGRITY,
        Error::UnknownId(_) | Error::MissingPayload(_) | Error::MissingText(_) => TANN_NOT_FOUND,
        _ => TANN_STORAGE,
    }
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(code_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TANN_NULL_ARGUMENT, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TANN_OK,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            TANN_PANIC
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TANN_INVALID_ARGUMENT, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// Cache and backend settings for opening an index.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TannOpenOptions {
    /// Tier-1 capacity in vectors.
    pub tier1_capacity: usize,
    /// Tier-2 capacity in vectors.
    pub tier2_capacity: usize,
    /// `TANN_BACKEND_*`; ignored by [`tann_index_open_host`].
    pub backend: u32,
    /// Simulated per-transaction cost.
    pub t_tx_ms: f64,
    /// Simulated per-item cost.
    pub t_item_ms: f64,
}

/// Defaults: 1024 + 1024 cache slots, simulated backend, 10 ms + 0.01 ms.
#[no_mangle]
pub extern "C" fn tann_open_options_default() -> TannOpenOptions {
    let m = LatencyModel::default();
    TannOpenOptions {
        tier1_capacity: 1024,
        tier2_capacity: 1024,
        backend: TANN_BACKEND_SIMULATED,
        t_tx_ms: m.t_tx_ms,
        t_item_ms: m.t_item_ms,
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TannQueryStats {
    pub n_q: u64,
    pub n_db: u64,
    pub items_fetched: u64,
    pub evaluated_fetched: u64,
    pub distance_evals: u64,
    pub t_db_ns: u64,
    pub intra_flushes: u64,
    pub inter_flushes: u64,
}

impl From<tierann::QueryStats> for TannQueryStats {
    fn from(s: tierann::QueryStats) -> Self {
        TannQueryStats {
            n_q: s.n_q,
            n_db: s.n_db,
            items_fetched: s.items_fetched,
            evaluated_fetched: s.evaluated_fetched,
            distance_evals: s.distance_evals,
            t_db_ns: s.t_db_ns,
            intra_flushes: s.intra_flushes,
            inter_flushes: s.inter_flushes,
        }
    }
}

/// Cumulative counters of the cache hierarchy.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TannStoreStats {
    pub n_db: u64,
    pub items_fetched: u64,
    pub hits_t1: u64,
    pub hits_t2: u64,
    pub t_db_total_ns: u64,
    pub t1_evictions: u64,
    pub t2_drops: u64,
    pub resident_t1: usize,
    pub resident_t2: usize,
}

/// Completion handle for one asynchronous host read.
pub struct TannRequest {
    done: Completer<Vec<Embedding>>,
    dimension: usize,
    count: usize,
}

/// Synchronous host read: fill `out` with `n * dimension` floats in request
/// order and return 0, or return nonzero on failure.
pub type TannHostGet =
    Option<unsafe extern "C" fn(user_data: *mut c_void, ids: *const u64, n: usize, out: *mut f32) -> i32>;

/// Asynchronous host read. The host must later pass `request` to exactly one
/// of [`tann_request_complete`] or [`tann_request_fail`], from any thread.
pub type TannHostSubmit = Option<
    unsafe extern "C" fn(user_data: *mut c_void, ids: *const u64, n: usize, request: *mut TannRequest),
>;

/// Tier 3 provided by the host. Each engine read is one call. Set `submit`
/// for asynchronous hosts, otherwise `get`. Callbacks may run on any thread.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct TannHostStore {
    pub user_data: *mut c_void,
    pub get: TannHostGet,
    pub submit: TannHostSubmit,
}

struct HostBackend {
    host: TannHostStore,
    dimension: usize,
    ids: Vec<VectorId>,
}

// The host promises thread-safe callbacks.
unsafe impl Send for HostBackend {}
unsafe impl Sync for HostBackend {}

impl AsyncBackend for HostBackend {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn contains(&self, id: VectorId) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    fn ids(&self) -> Vec<VectorId> {
        self.ids.clone()
    }

    fn submit(&self, ids: Vec<VectorId>, done: Completer<Vec<Embedding>>) {
        if let Some(submit) = self.host.submit {
            let req = Box::into_raw(Box::new(TannRequest {
                done,
                dimension: self.dimension,
                count: ids.len(),
            }));
            unsafe { submit(self.host.user_data, ids.as_ptr(), ids.len(), req) };
            return;
        }
        let Some(get) = self.host.get else {
            done.fail("host store has neither get nor submit");
            return;
        };
        let mut buf = vec![0f32; ids.len() * self.dimension];
        let rc = unsafe { get(self.host.user_data, ids.as_ptr(), ids.len(), buf.as_mut_ptr()) };
        if rc != 0 {
            done.fail(format!("host get returned {rc}"));
            return;
        }
        match split(&buf, self.dimension) {
            Ok(v) => done.complete(v),
            Err(e) => done.fail(e.to_string()),
        }
    }

    fn write_batch(&self, _items: &[(VectorId, Embedding)]) -> tierann::Result<()> {
        Err(Error::Storage("host store is read-only".into()))
    }
}

fn split(buf: &[f32], dimension: usize) -> tierann::Result<Vec<Embedding>> {
    buf.chunks_exact(dimension)
        .map(|c| Embedding::new(c.to_vec()))
        .collect()
}

/// Delivers the payloads of an asynchronous read and frees `request`.
/// `vectors` holds `n * dimension` floats in request order.
///
/// # Safety
/// `request` must come from a `submit` callback and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tann_request_complete(
    request: *mut TannRequest,
    vectors: *const f32,
    len: usize,
) -> i32 {
    if request.is_null() {
        set_error("request is null");
        return TANN_NULL_ARGUMENT;
    }
    let req = Box::from_raw(request);
    guard(move || {
        if vectors.is_null() && len > 0 {
            req.done.fail("host completed with a null buffer");
            return Err(null("vectors"));
        }
        if len != req.count * req.dimension {
            let msg = format!("expected {} floats, got {len}", req.count * req.dimension);
            req.done.fail(msg.clone());
            return Err(Failure(TANN_INVALID_ARGUMENT, msg));
        }
        let data = if len == 0 { &[][..] } else { std::slice::from_raw_parts(vectors, len) };
        match split(data, req.dimension) {
            Ok(v) => {
                req.done.complete(v);
                Ok(())
            }
            Err(e) => {
                req.done.fail(e.to_string());
                Err(e.into())
            }
        }
    })
}

/// Fails an asynchronous read and frees `request`.
///
/// # Safety
/// As for [`tann_request_complete`]; `reason` may be null.
#[no_mangle]
pub unsafe extern "C" fn tann_request_fail(request: *mut TannRequest, reason: *const c_char) -> i32 {
    if request.is_null() {
        set_error("request is null");
        return TANN_NULL_ARGUMENT;
    }
    let req = Box::from_raw(request);
    let reason = if reason.is_null() {
        "host read failed".to_string()
    } else {
        CStr::from_ptr(reason).to_string_lossy().into_owned()
    };
    req.done.fail(reason);
    TANN_OK
}

/// An opened index with its cache hierarchy.
pub struct TannIndex {
    index: HnswIndex,
    store: TieredVectorStore,
}

fn tier_config(o: &TannOpenOptions) -> TierConfig {
    TierConfig {
        tier1_capacity: o.tier1_capacity,
        tier2_capacity: o.tier2_capacity,
        split_ratio: if o.tier1_capacity + o.tier2_capacity == 0 {
            0.5
        } else {
            o.tier1_capacity as f64 / (o.tier1_capacity + o.tier2_capacity) as f64
        },
        eviction: EvictionKind::Fifo,
    }
}

unsafe fn options(opts: *const TannOpenOptions) -> TannOpenOptions {
    if opts.is_null() {
        tann_open_options_default()
    } else {
        *opts
    }
}

unsafe fn emit(out: *mut *mut TannIndex, index: HnswIndex, store: TieredVectorStore) {
    *out = Box::into_raw(Box::new(TannIndex { index, store }));
}

/// Opens a snapshot written by `tierann build`. `opts` may be null.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tann_index_open(
    path: *const c_char,
    opts: *const TannOpenOptions,
    out: *mut *mut TannIndex,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let o = options(opts);
        let bundle = Bundle::open(&path)?;
        let backend: Arc<dyn ExternalStore> = match o.backend {
            TANN_BACKEND_SIMULATED => {
                let model = LatencyModel::new(o.t_tx_ms, o.t_item_ms)?;
                Arc::new(SimulatedStore::copy_from(bundle.vectors.as_ref(), model)?)
            }
            TANN_BACKEND_DISK => bundle.vectors.clone(),
            other => {
                return Err(Failure(TANN_INVALID_ARGUMENT, format!("unknown backend {other}")))
            }
        };
        let store = TieredVectorStore::new(backend, tier_config(&o));
        emit(out, bundle.index, store);
        Ok(())
    })
}

/// Opens a snapshot whose payloads are served by the host.
///
/// # Safety
/// As for [`tann_index_open`]; `host` callbacks must stay valid until the
/// handle is freed.
#[no_mangle]
pub unsafe extern "C" fn tann_index_open_host(
    path: *const c_char,
    opts: *const TannOpenOptions,
    host: TannHostStore,
    out: *mut *mut TannIndex,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if host.get.is_none() && host.submit.is_none() {
            return Err(Failure(TANN_INVALID_ARGUMENT, "host store has no callbacks".into()));
        }
        let path = path_arg(path)?;
        let o = options(opts);
        let snap = tierann::load_index(&path)?;
        let mut ids = snap.index.ids().to_vec();
        ids.sort_unstable();
        let backend = HostBackend {
            host,
            dimension: snap.index.dimension(),
            ids,
        };
        let store = TieredVectorStore::new(Arc::new(BridgedStore::new(backend)), tier_config(&o));
        emit(out, snap.index, store);
        Ok(())
    })
}

/// Frees a handle. Null is ignored.
///
/// # Safety
/// `index` must come from an open call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tann_index_free(index: *mut TannIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// # Safety
/// `index` is a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tann_index_len(index: *const TannIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.len())
}

/// # Safety
/// `index` is a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tann_index_dimension(index: *const TannIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.dimension())
}

/// Searches for the `k` nearest neighbours of `query` (`dim` floats).
/// `out_ids` and `out_distances` need room for `k` entries; `out_count`
/// receives the number written. `stats` may be null. `prefetch_size` only
/// matters for `TANN_POLICY_FIXED_PREFETCH`.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tann_query(
    index: *mut TannIndex,
    query: *const f32,
    dim: usize,
    k: usize,
    ef: usize,
    policy: u32,
    prefetch_size: usize,
    out_ids: *mut u64,
    out_distances: *mut f32,
    out_count: *mut usize,
    stats: *mut TannQueryStats,
) -> i32 {
    guard(|| {
        let idx = index.as_ref().ok_or_else(|| null("index"))?;
        if query.is_null() {
            return Err(null("query"));
        }
        if out_ids.is_null() || out_distances.is_null() || out_count.is_null() {
            return Err(null("output buffer"));
        }
        let policy = match policy {
            TANN_POLICY_LAZY => FetchPolicy::Lazy,
            TANN_POLICY_ON_DEMAND => FetchPolicy::OnDemandItem,
            TANN_POLICY_FIXED_PREFETCH => FetchPolicy::FixedPrefetch {
                size: prefetch_size.max(1),
            },
            other => {
                return Err(Failure(TANN_INVALID_ARGUMENT, format!("unknown policy {other}")))
            }
        };
        let q = std::slice::from_raw_parts(query, dim);
        let params = SearchParams::new(k, ef)?;
        let (hits, s) = policy.run(&idx.index, &idx.store, q, params)?;
        for (i, h) in hits.iter().enumerate() {
            *out_ids.add(i) = h.id;
            *out_distances.add(i) = h.distance;
        }
        *out_count = hits.len();
        if !stats.is_null() {
            *stats = s.into();
        }
        Ok(())
    })
}

/// Copies the cumulative cache counters into `out`.
///
/// # Safety
/// `index` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn tann_store_stats(index: *const TannIndex, out: *mut TannStoreStats) -> i32 {
    guard(|| {
        let idx = index.as_ref().ok_or_else(|| null("index"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = idx.store.stats();
        let (r1, r2) = idx.store.resident_counts();
        *out = TannStoreStats {
            n_db: s.n_db,
            items_fetched: s.items_fetched,
            hits_t1: s.hits_t1,
            hits_t2: s.hits_t2,
            t_db_total_ns: s.t_db_total_ns,
            t1_evictions: s.t1_evictions,
            t2_drops: s.t2_drops,
            resident_t1: r1,
            resident_t2: r2,
        };
        Ok(())
    })
}

/// Resizes the caches, evicting as needed.
///
/// # Safety
/// `index` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn tann_set_capacity(index: *mut TannIndex, tier1: usize, tier2: usize) -> i32 {
    guard(|| {
        let idx = index.as_ref().ok_or_else(|| null("index"))?;
        let mut c = idx.store.config();
        c.tier1_capacity = tier1;
        c.tier2_capacity = tier2;
        idx.store.reconfigure(c);
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`). Returns the full message length.
///
/// # Safety
/// `buf` is writable for `cap` bytes, or null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn tann_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = e.len().min(cap - 1);
            ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn tann_status_name(code: i32) -> *const c_char {
    let s: &'static CStr = match code {
        TANN_OK => c"ok",
        TANN_NULL_ARGUMENT => c"null argument",
        TANN_INVALID_ARGUMENT => c"invalid argument",
        TANN_IO => c"i/o error",
        TANN_FORMAT => c"format error",
        TANN_INTEGRITY => c"integrity error",
        TANN_NOT_FOUND => c"not found",
        TANN_DIMENSION => c"dimension mismatch",
        TANN_STORAGE => c"storage error",
        TANN_BUFFER_TOO_SMALL => c"buffer too small",
        TANN_PANIC => c"internal panic",
        _ => c"unknown status",
    };
    s.as_ptr()
}

#[no_mangle]
pub extern "C" fn tann_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
