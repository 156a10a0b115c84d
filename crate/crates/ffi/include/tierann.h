#ifndef TIERANN_H
#define TIERANN_H

#include <stddef.h>
#include <stdint.h>

#define TANN_OK 0

#define TANN_NULL_ARGUMENT 1

#define TANN_INVALID_ARGUMENT 2

#define TANN_IO 3

#define TANN_FORMAT 4

#define TANN_INTEGRITY 5

#define TANN_NOT_FOUND 6

#define TANN_DIMENSION 7

#define TANN_STORAGE 8

#define TANN_BUFFER_TOO_SMALL 9

#define TANN_PANIC 10

// Tier-3 backend used by [`tann_index_open`].
#define TANN_BACKEND_SIMULATED 0

#define TANN_BACKEND_DISK 1

#define TANN_POLICY_LAZY 0

#define TANN_POLICY_ON_DEMAND 1

#define TANN_POLICY_FIXED_PREFETCH 2

// An opened index with its cache hierarchy.
typedef struct TannIndex TannIndex;

// Completion handle for one asynchronous host read.
typedef struct TannRequest TannRequest;

// Cache and backend settings for opening an index.
typedef struct TannOpenOptions {
  // Tier-1 capacity in vectors.
  size_t tier1_capacity;
  // Tier-2 capacity in vectors.
  size_t tier2_capacity;
  // `TANN_BACKEND_*`; ignored by [`tann_index_open_host`].
  uint32_t backend;
  // Simulated per-transaction cost.
  double t_tx_ms;
  // Simulated per-item cost.
  double t_item_ms;
} TannOpenOptions;

// Synchronous host read: fill `out` with `n * dimension` floats in request
// order and return 0, or return nonzero on failure.
typedef int32_t (*TannHostGet)(void *user_data, const uint64_t *ids, size_t n, float *out);

// Asynchronous host read. The host must later pass `request` to exactly one
// of [`tann_request_complete`] or [`tann_request_fail`], from any thread.
typedef void (*TannHostSubmit)(void *user_data,
                               const uint64_t *ids,
                               size_t n,
                               struct TannRequest *request);

// Tier 3 provided by the host. Each engine read is one call. Set `submit`
// for asynchronous hosts, otherwise `get`. Callbacks may run on any thread.
typedef struct TannHostStore {
  void *user_data;
  TannHostGet get;
  TannHostSubmit submit;
} TannHostStore;

typedef struct TannQueryStats {
  uint64_t n_q;
  uint64_t n_db;
  uint64_t items_fetched;
  uint64_t evaluated_fetched;
  uint64_t distance_evals;
  uint64_t t_db_ns;
  uint64_t intra_flushes;
  uint64_t inter_flushes;
} TannQueryStats;

// Cumulative counters of the cache hierarchy.
typedef struct TannStoreStats {
  uint64_t n_db;
  uint64_t items_fetched;
  uint64_t hits_t1;
  uint64_t hits_t2;
  uint64_t t_db_total_ns;
  uint64_t t1_evictions;
  uint64_t t2_drops;
  size_t resident_t1;
  size_t resident_t2;
} TannStoreStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Defaults: 1024 + 1024 cache slots, simulated backend, 10 ms + 0.01 ms.
struct TannOpenOptions tann_open_options_default(void);

// Delivers the payloads of an asynchronous read and frees `request`.
// `vectors` holds `n * dimension` floats in request order.
//
// # Safety
// `request` must come from a `submit` callback and not be used afterwards.
int32_t tann_request_complete(struct TannRequest *request, const float *vectors, size_t len);

// Fails an asynchronous read and frees `request`.
//
// # Safety
// As for [`tann_request_complete`]; `reason` may be null.
int32_t tann_request_fail(struct TannRequest *request, const char *reason);

// Opens a snapshot written by `tierann build`. `opts` may be null.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
int32_t tann_index_open(const char *path,
                        const struct TannOpenOptions *opts,
                        struct TannIndex **out);

// Opens a snapshot whose payloads are served by the host.
//
// # Safety
// As for [`tann_index_open`]; `host` callbacks must stay valid until the
// handle is freed.
int32_t tann_index_open_host(const char *path,
                             const struct TannOpenOptions *opts,
                             struct TannHostStore host,
                             struct TannIndex **out);

// Frees a handle. Null is ignored.
//
// # Safety
// `index` must come from an open call and not be used afterwards.
void tann_index_free(struct TannIndex *index);

// # Safety
// `index` is a live handle or null.
size_t tann_index_len(const struct TannIndex *index);

// # Safety
// `index` is a live handle or null.
size_t tann_index_dimension(const struct TannIndex *index);

// Searches for the `k` nearest neighbours of `query` (`dim` floats).
// `out_ids` and `out_distances` need room for `k` entries; `out_count`
// receives the number written. `stats` may be null. `prefetch_size` only
// matters for `TANN_POLICY_FIXED_PREFETCH`.
//
// # Safety
// Buffers must be valid for the stated lengths.
int32_t tann_query(struct TannIndex *index,
                   const float *query,
                   size_t dim,
                   size_t k,
                   size_t ef,
                   uint32_t policy,
                   size_t prefetch_size,
                   uint64_t *out_ids,
                   float *out_distances,
                   size_t *out_count,
                   struct TannQueryStats *stats);

// Copies the cumulative cache counters into `out`.
//
// # Safety
// `index` is a live handle; `out` is writable.
int32_t tann_store_stats(const struct TannIndex *index, struct TannStoreStats *out);

// Resizes the caches, evicting as needed.
//
// # Safety
// `index` is a live handle.
int32_t tann_set_capacity(struct TannIndex *index, size_t tier1, size_t tier2);

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `cap`). Returns the full message length.
//
// # Safety
// `buf` is writable for `cap` bytes, or null with `cap == 0`.
size_t tann_last_error(char *buf, size_t cap);

// Static name of a status code.
const char *tann_status_name(int32_t code);

const char *tann_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TIERANN_H */
