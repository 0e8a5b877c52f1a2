#ifndef DUPLEX_H
#define DUPLEX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum DuplexStatus {
  DUPLEX_STATUS_OK = 0,
  DUPLEX_STATUS_NULL_POINTER = 1,
  DUPLEX_STATUS_CONFIG = 2,
  DUPLEX_STATUS_PARSE = 3,
  DUPLEX_STATUS_BOUNDS = 4,
  DUPLEX_STATUS_SHAPE = 5,
  DUPLEX_STATUS_DATA = 6,
  DUPLEX_STATUS_NON_FINITE = 7,
  DUPLEX_STATUS_CHECKPOINT = 8,
  DUPLEX_STATUS_AUTODIFF = 9,
  DUPLEX_STATUS_IO = 10,
  DUPLEX_STATUS_INVALID_UTF8 = 11,
  DUPLEX_STATUS_PANIC = 12,
} DuplexStatus;

// Prototype distance used by the relation decoder.
typedef enum DuplexDistance {
  DUPLEX_DISTANCE_L1 = 0,
  DUPLEX_DISTANCE_L2 = 1,
} DuplexDistance;

// Amplitude and phase matrices, one row per node.
typedef struct DuplexEmbedding DuplexEmbedding;

// A directed graph with dense node ids `0..n`.
typedef struct DuplexGraph DuplexGraph;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL after a
// success. Valid until the next call into the library on this thread.
const char *duplex_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *duplex_version(void);

// Builds a graph on `num_nodes` nodes from parallel `src`/`dst` arrays.
// Self-loops and duplicate edges are rejected.
//
// # Safety
// `src` and `dst` must point to `num_edges` readable values; `out` must be
// writable.
enum DuplexStatus duplex_graph_from_edges(size_t num_nodes,
                                          const uint64_t *src,
                                          const uint64_t *dst,
                                          size_t num_edges,
                                          struct DuplexGraph **out);

// Reads a whitespace-separated edge list. A negative `num_nodes` infers the
// node count and remaps ids to `0..n` in ascending order of original id.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum DuplexStatus duplex_graph_load_edge_list(const char *path,
                                              int64_t num_nodes,
                                              struct DuplexGraph **out);

// Node count, or 0 for NULL.
//
// # Safety
// `graph` must be NULL or a live handle.
size_t duplex_graph_num_nodes(const struct DuplexGraph *graph);

// Edge count, or 0 for NULL.
//
// # Safety
// `graph` must be NULL or a live handle.
size_t duplex_graph_num_edges(const struct DuplexGraph *graph);

// Original id of dense node `u` (equal to `u` unless ids were remapped).
//
// # Safety
// `graph` must be a live handle and `out` writable.
enum DuplexStatus duplex_graph_original_id(const struct DuplexGraph *graph,
                                           uint64_t u,
                                           uint64_t *out);

// # Safety
// `graph` must be NULL or a handle not yet freed.
void duplex_graph_free(struct DuplexGraph *graph);

// Trains the encoder self-supervised on the whole graph and returns the
// node embeddings. `config_json` uses the CLI's dotted keys
// (`{"train.max_epochs": 200, "encoder.dims": [16, 16]}`); NULL means
// defaults. `seed` overrides any seed in the config.
//
// # Safety
// `graph` must be a live handle, `config_json` NULL or NUL-terminated, and
// `out` writable.
enum DuplexStatus duplex_train_embedding(const struct DuplexGraph *graph,
                                         const char *config_json,
                                         uint64_t seed,
                                         struct DuplexEmbedding **out);

// Wraps caller-owned row-major `num_nodes × dim` amplitude and phase arrays.
// The data is copied.
//
// # Safety
// Both arrays must hold `num_nodes * dim` readable doubles.
enum DuplexStatus duplex_embedding_from_arrays(size_t num_nodes,
                                               size_t dim,
                                               const double *amplitude,
                                               const double *phase,
                                               struct DuplexEmbedding **out);

// Reads an `id,a_1..a_d,theta_1..theta_d` CSV as written by `duplex export`.
// Rows keep file order.
//
// # Safety
// `path` must be NUL-terminated and `out` writable.
enum DuplexStatus duplex_embedding_read_csv(const char *path, struct DuplexEmbedding **out);

// Writes the embedding as CSV keyed by the graph's original ids.
//
// # Safety
// Handles must be live and `path` NUL-terminated.
enum DuplexStatus duplex_embedding_write_csv(const struct DuplexEmbedding *embedding,
                                             const struct DuplexGraph *graph,
                                             const char *path);

// Row count, or 0 for NULL.
//
// # Safety
// `embedding` must be NULL or a live handle.
size_t duplex_embedding_num_nodes(const struct DuplexEmbedding *embedding);

// Columns per matrix, or 0 for NULL.
//
// # Safety
// `embedding` must be NULL or a live handle.
size_t duplex_embedding_dim(const struct DuplexEmbedding *embedding);

// Copies amplitude and phase into row-major buffers of `len` doubles each;
// `len` must equal `num_nodes * dim`. Either buffer may be NULL to skip it.
//
// # Safety
// Non-NULL buffers must be writable for `len` doubles.
enum DuplexStatus duplex_embedding_copy(const struct DuplexEmbedding *embedding,
                                        double *amplitude,
                                        double *phase,
                                        size_t len);

// Complex score of the ordered pair `(u, v)`.
//
// # Safety
// `embedding` must be live; `re` and `im` writable.
enum DuplexStatus duplex_embedding_score(const struct DuplexEmbedding *embedding,
                                         uint64_t u,
                                         uint64_t v,
                                         double *re,
                                         double *im);

// Probabilities of forward, reverse, bidirectional and no edge for `(u, v)`,
// written to `probs[0..4]` in that order.
//
// # Safety
// `embedding` must be live; `probs` writable for 4 doubles.
enum DuplexStatus duplex_embedding_relation_probs(const struct DuplexEmbedding *embedding,
                                                  uint64_t u,
                                                  uint64_t v,
                                                  enum DuplexDistance distance,
                                                  double *probs);

// # Safety
// `embedding` must be NULL or a handle not yet freed.
void duplex_embedding_free(struct DuplexEmbedding *embedding);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUPLEX_H */
