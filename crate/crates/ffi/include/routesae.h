#ifndef ROUTESAE_H
#define ROUTESAE_H

/* Generated by cbindgen from crates/ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Architecture tags mirrored as integers.
 */
typedef enum {
  RsaeArchitecture_Relu = 0,
  RsaeArchitecture_TopK = 1,
  RsaeArchitecture_RouteHard = 2,
  RsaeArchitecture_RouteSoft = 3,
  RsaeArchitecture_RouteRandom = 4,
  RsaeArchitecture_Crosscoder = 5,
} RsaeArchitecture;

/**
 * Status codes returned by every fallible call.
 */
typedef enum {
  RsaeStatus_Ok = 0,
  RsaeStatus_NullPointer = 1,
  RsaeStatus_InvalidArgument = 2,
  RsaeStatus_IoError = 3,
  RsaeStatus_FormatError = 4,
  RsaeStatus_ShapeError = 5,
  RsaeStatus_Unsupported = 6,
  RsaeStatus_BufferTooSmall = 7,
} RsaeStatus;

/**
 * Loaded artifact plus the normalization it was trained under.
 */
typedef struct RsaeModel RsaeModel;

/**
 * Frozen toy language model.
 */
typedef struct RsaeToyLm RsaeToyLm;

/**
 * Shape summary of a loaded model.
 */
typedef struct {
  RsaeArchitecture architecture;
  /**
   * Activation width.
   */
  uint32_t d;
  /**
   * Latent width M.
   */
  uint32_t latent_width;
  /**
   * Sparsity k.
   */
  uint32_t k;
  /**
   * Number of routed layers L.
   */
  uint32_t num_layers;
} RsaeModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static library version string (NUL-terminated).
 */
const char *rsae_version(void);

/**
 * Copy the last error message into `buf` (truncated to `len - 1` bytes,
 * always NUL-terminated). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (query mode).
 */
uintptr_t rsae_last_error(char *buf, uintptr_t len);

/**
 * Load a training checkpoint plus its normalization statistics file.
 * `stats_path` may be null, in which case unit scales are assumed.
 *
 * # Safety
 * `checkpoint_path` and (when non-null) `stats_path` must be NUL-terminated
 * strings; `out` must point to a writable handle slot.
 */
RsaeStatus rsae_model_load(const char *checkpoint_path, const char *stats_path, RsaeModel **out);

/**
 * # Safety
 * `model` must have come from `rsae_model_load` and not already be freed.
 */
void rsae_model_free(RsaeModel *model);

/**
 * # Safety
 * `model` must be a live handle; `info` must be writable.
 */
RsaeStatus rsae_model_info(const RsaeModel *model, RsaeModelInfo *info);

/**
 * Encode one multi-layer activation record (`num_layers * d` raw floats,
 * layer-major). Writes up to `capacity` active (index, value) pairs sorted
 * by index, the active count, and the selected routed layer (the absolute
 * layer id, or `u32::MAX` for the crosscoder).
 *
 * # Safety
 * All pointers must be valid for their documented lengths; `activations`
 * must hold exactly `num_layers * d` floats.
 */
RsaeStatus rsae_encode(const RsaeModel *model,
                       const float *activations,
                       uintptr_t activations_len,
                       uint64_t sample_tag,
                       uint32_t *out_indices,
                       float *out_values,
                       uintptr_t capacity,
                       uintptr_t *out_count,
                       uint32_t *out_selected_layer);

/**
 * Decode an active (index, value) set back to a d-width reconstruction in
 * the normalized space. Crosscoder models are not supported here (they
 * produce one reconstruction per layer).
 *
 * # Safety
 * `indices`/`values` must hold `count` entries; `out` must hold d floats.
 */
RsaeStatus rsae_decode(const RsaeModel *model,
                       const uint32_t *indices,
                       const float *values,
                       uintptr_t count,
                       float *out,
                       uintptr_t out_len);

/**
 * Initialize a frozen toy language model from its architecture parameters.
 *
 * # Safety
 * `out` must point to a writable handle slot.
 */
RsaeStatus rsae_toylm_init(uint32_t d_model,
                           uint32_t n_layers,
                           uint32_t n_heads,
                           uint32_t max_seq,
                           uint64_t seed,
                           RsaeToyLm **out);

/**
 * Load toy-model weights from a weight envelope file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
RsaeStatus rsae_toylm_load(const char *path, RsaeToyLm **out);

/**
 * # Safety
 * `lm` must have come from a toy-model constructor and not be freed twice.
 */
void rsae_toylm_free(RsaeToyLm *lm);

/**
 * Next-token logits for a token sequence: writes `len * 256` floats.
 *
 * # Safety
 * `tokens` must hold `len` token ids; `out_logits` must hold `out_len`
 * floats with `out_len == len * 256`.
 */
RsaeStatus rsae_toylm_logits(const RsaeToyLm *lm,
                             const uint32_t *tokens,
                             uintptr_t len,
                             float *out_logits,
                             uintptr_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROUTESAE_H */
