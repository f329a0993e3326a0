/* C interface for the tpn library. Generated by cbindgen; do not edit. */

#ifndef TPN_H
#define TPN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible FFI call. Mirrors the CLI exit codes:
// usage errors, data errors, numerical errors.
typedef enum TpnStatus {
  // Success.
  TPN_STATUS_OK = 0,
  // Invalid argument or configuration.
  TPN_STATUS_INVALID_ARGUMENT = 1,
  // Dataset, file format, or I/O failure.
  TPN_STATUS_DATA = 2,
  // Numerical failure: singular system, NaN, non-convergence.
  TPN_STATUS_NUMERICAL = 3,
  // A required pointer argument was NULL.
  TPN_STATUS_NULL_POINTER = 4,
} TpnStatus;

// Opaque training checkpoint handle: model parameters, optimizer state,
// and the embedded config text.
typedef struct TpnCheckpoint TpnCheckpoint;

// Opaque dataset handle.
typedef struct TpnDataset TpnDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Returns the library version as a static string.
const char *tpn_version(void);

// Returns the message of the calling thread's most recent failure, or an
// empty string if none. The pointer is valid until the thread's next
// failing call into this library.
const char *tpn_last_error(void);

// Generates a synthetic dataset. `kind` is one of `gaussian-blobs`,
// `concentric-rings`, `noisy-arcs`.
//
// # Safety
// `kind` must be NUL-terminated; `out_dataset` must be valid for writes.
enum TpnStatus tpn_dataset_generate(const char *kind,
                                    size_t classes,
                                    size_t per_class,
                                    size_t dim,
                                    double noise,
                                    uint64_t seed,
                                    struct TpnDataset **out_dataset);

// Loads a dataset from an FSDS file. Split assignments come from the
// `.split` sidecar next to `path` when present.
//
// # Safety
// `path` must be NUL-terminated; `out_dataset` must be valid for writes.
enum TpnStatus tpn_dataset_load(const char *path, struct TpnDataset **out_dataset);

// Saves a dataset as FSDS plus its `.split` sidecar.
//
// # Safety
// `dataset` must be a live handle; `path` must be NUL-terminated.
enum TpnStatus tpn_dataset_save(const struct TpnDataset *dataset, const char *path);

// Writes the number of classes in the dataset.
//
// # Safety
// `dataset` must be a live handle; `out_count` must be valid for writes.
enum TpnStatus tpn_dataset_class_count(const struct TpnDataset *dataset, size_t *out_count);

// Writes the flattened example length (product of the example shape).
//
// # Safety
// `dataset` must be a live handle; `out_len` must be valid for writes.
enum TpnStatus tpn_dataset_example_len(const struct TpnDataset *dataset, size_t *out_len);

// Creates a new dataset restricted to one split. `split` is `train`,
// `val`, `test`, or `all` for an unrestricted copy.
//
// # Safety
// `dataset` must be a live handle; `split` must be NUL-terminated;
// `out_dataset` must be valid for writes.
enum TpnStatus tpn_dataset_restrict(const struct TpnDataset *dataset,
                                    const char *split,
                                    struct TpnDataset **out_dataset);

// Frees a dataset handle. NULL is a no-op.
//
// # Safety
// `dataset` must be NULL or a handle not freed before.
void tpn_dataset_free(struct TpnDataset *dataset);

// Loads a checkpoint from a TPNC file.
//
// # Safety
// `path` must be NUL-terminated; `out_checkpoint` must be valid for
// writes.
enum TpnStatus tpn_checkpoint_load(const char *path, struct TpnCheckpoint **out_checkpoint);

// Saves a checkpoint as a TPNC file.
//
// # Safety
// `checkpoint` must be a live handle; `path` must be NUL-terminated.
enum TpnStatus tpn_checkpoint_save(const struct TpnCheckpoint *checkpoint, const char *path);

// Writes the number of training episodes the checkpoint has seen.
//
// # Safety
// `checkpoint` must be a live handle; `out_episodes` must be valid for
// writes.
enum TpnStatus tpn_checkpoint_episodes(const struct TpnCheckpoint *checkpoint,
                                       uint64_t *out_episodes);

// Writes the total scalar parameter count of the checkpoint's model.
//
// # Safety
// `checkpoint` must be a live handle; `out_count` must be valid for
// writes.
enum TpnStatus tpn_checkpoint_param_count(const struct TpnCheckpoint *checkpoint,
                                          size_t *out_count);

// Returns the checkpoint's canonical config text as a NUL-terminated
// string owned by the caller. Free it with `tpn_string_free`.
//
// # Safety
// `checkpoint` must be a live handle; `out_text` must be valid for
// writes.
enum TpnStatus tpn_checkpoint_config(const struct TpnCheckpoint *checkpoint, char **out_text);

// Frees a string returned by this library. NULL is a no-op.
//
// # Safety
// `text` must be NULL or a string from this library not freed before.
void tpn_string_free(char *text);

// Frees a checkpoint handle. NULL is a no-op.
//
// # Safety
// `checkpoint` must be NULL or a handle not freed before.
void tpn_checkpoint_free(struct TpnCheckpoint *checkpoint);

// Trains a model on one split of a dataset and returns the final
// checkpoint. `config` is config text (`key = value` lines, empty string
// for all defaults); `split` selects the training classes. Training is
// deterministic for a given config and dataset.
//
// # Safety
// `dataset` must be a live handle; `split` and `config` must be
// NUL-terminated; `out_checkpoint` must be valid for writes.
enum TpnStatus tpn_train(const struct TpnDataset *dataset,
                         const char *split,
                         const char *config,
                         struct TpnCheckpoint **out_checkpoint);

// Evaluates a checkpoint on a dataset: `episodes` N-way K-shot episodes
// with `t_query` queries each, classified by joint closed-form
// propagation. Writes mean query accuracy and its 95% confidence
// half-width. Deterministic for a given seed.
//
// # Safety
// `checkpoint` and `dataset` must be live handles; `out_mean` and
// `out_ci95` must be valid for writes.
enum TpnStatus tpn_eval(const struct TpnCheckpoint *checkpoint,
                        const struct TpnDataset *dataset,
                        size_t n_way,
                        size_t k_shot,
                        size_t t_query,
                        size_t episodes,
                        uint64_t seed,
                        double *out_mean,
                        double *out_ci95);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TPN_H */
