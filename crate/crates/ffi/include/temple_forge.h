#ifndef TEMPLE_FORGE_H
#define TEMPLE_FORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TfStatus {
  TF_STATUS_OK = 0,
  TF_STATUS_NULL_POINTER = 1,
  TF_STATUS_INVALID_ARGUMENT = 2,
  TF_STATUS_IO = 3,
  TF_STATUS_INVALID_DATASET = 4,
  TF_STATUS_BUFFER_TOO_SMALL = 5,
  TF_STATUS_PANIC = 6,
} TfStatus;

// Opaque perturbation result.
typedef struct TfPerturbation TfPerturbation;

// Opaque toy model.
typedef struct TfToyModel TfToyModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *tf_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *tf_version(void);

// Per-(video, kind, level) perturbation seed.
//
// # Safety
// `video_id` and `kind` must be NUL-terminated strings; `out` must be writable.
enum TfStatus tf_derive_seed(uint64_t global_seed,
                             const char *video_id,
                             const char *kind,
                             uint32_t r,
                             uint64_t *out);

// Frame dimensions after fitting a pixel budget.
//
// # Safety
// `out_width` and `out_height` must be writable.
enum TfStatus tf_downscale_dims(uint32_t width,
                                uint32_t height,
                                uint64_t max_pixels,
                                uint32_t *out_width,
                                uint32_t *out_height);

// Sharpness score of a packed RGB8 image.
//
// # Safety
// `rgb` must point to `width * height * 3` bytes; `out` must be writable.
enum TfStatus tf_laplacian_variance(const uint8_t *rgb,
                                    uint32_t width,
                                    uint32_t height,
                                    double *out);

// Perturbs clips `0..n_clips`. `kind` is "drop", "shuffle" or "reverse".
//
// # Safety
// `kind` must be a NUL-terminated string; `out` must be writable. The
// handle must be released with [`tf_perturbation_free`].
enum TfStatus tf_perturbation_apply(size_t n_clips,
                                    const char *kind,
                                    uint32_t r,
                                    uint64_t seed,
                                    struct TfPerturbation **out);

// Number of output clip ids; 0 for a null handle.
//
// # Safety
// `p` must be null or a live handle.
size_t tf_perturbation_len(const struct TfPerturbation *p);

// Copies the output clip ids into `buf` (capacity `cap`).
//
// # Safety
// `p` must be a live handle; `buf` must hold `cap` elements.
enum TfStatus tf_perturbation_output(const struct TfPerturbation *p, size_t *buf, size_t cap);

// Number of indivisible groups (0 for drop).
//
// # Safety
// `p` must be null or a live handle.
size_t tf_perturbation_group_count(const struct TfPerturbation *p);

// Copies the group sizes, in original order, into `buf`.
//
// # Safety
// `p` must be a live handle; `buf` must hold `cap` elements.
enum TfStatus tf_perturbation_group_sizes(const struct TfPerturbation *p, size_t *buf, size_t cap);

// Releases a perturbation handle. Null is ignored.
//
// # Safety
// `p` must be null or a handle not yet freed.
void tf_perturbation_free(struct TfPerturbation *p);

// Creates a `context_dim x vocab` model. `theta` may be null (all zeros) or
// point to `context_dim * vocab` row-major values.
//
// # Safety
// `theta` must be null or valid for the stated length; `out` must be
// writable. Release with [`tf_toy_model_free`].
enum TfStatus tf_toy_model_new(size_t vocab,
                               size_t context_dim,
                               const double *theta,
                               struct TfToyModel **out);

// # Safety
// `m` must be null or a handle not yet freed.
void tf_toy_model_free(struct TfToyModel *m);

// Log-likelihood of `tokens` given `context`.
//
// # Safety
// Pointers must be valid for their lengths; `out` must be writable.
enum TfStatus tf_toy_model_logprob(const struct TfToyModel *m,
                                   const double *context,
                                   size_t context_len,
                                   const uint32_t *tokens,
                                   size_t n_tokens,
                                   double *out);

// Preference loss of a single pair under `policy` against `reference`.
//
// # Safety
// Handles must be live; pointers valid for their lengths; `out` writable.
enum TfStatus tf_dpo_loss(const struct TfToyModel *policy,
                          const struct TfToyModel *reference,
                          const double *context,
                          size_t context_len,
                          const uint32_t *chosen,
                          size_t n_chosen,
                          const uint32_t *rejected,
                          size_t n_rejected,
                          double beta,
                          double *out);

// Re-checks a dataset directory. On success writes the record count to
// `out_total` (which may be null).
//
// # Safety
// `dir` must be a NUL-terminated path; `out_total` null or writable.
enum TfStatus tf_dataset_validate(const char *dir, size_t *out_total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TEMPLE_FORGE_H */
