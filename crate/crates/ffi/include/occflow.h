#ifndef OCCFLOW_H
#define OCCFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  OCCFLOW_STATUS_OK = 0,
  OCCFLOW_STATUS_NULL_ARGUMENT = 1,
  OCCFLOW_STATUS_INVALID_ARGUMENT = 2,
  OCCFLOW_STATUS_IO = 3,
  OCCFLOW_STATUS_FORMAT = 4,
  OCCFLOW_STATUS_FRAME_MISMATCH = 5,
  OCCFLOW_STATUS_MISSING_DECODER = 6,
  OCCFLOW_STATUS_OUT_OF_EXTENT = 7,
  OCCFLOW_STATUS_PANIC = 8,
} OccflowStatus;

typedef enum {
  OCCFLOW_DECODER_IMPLICIT = 0,
  OCCFLOW_DECODER_EXPLICIT = 1,
} OccflowDecoder;

/**
 * Encoder output for one scene, tied to the model that produced it.
 */
typedef struct OccflowFeatures OccflowFeatures;

/**
 * A loaded checkpoint.
 */
typedef struct OccflowModel OccflowModel;

/**
 * Simulated LiDAR and voxelization settings used to build model inputs
 * from a scenario. Must match the settings the model was trained with.
 */
typedef struct {
  uint32_t rays;
  double max_range;
  double range_noise;
  double min_height;
  double max_height;
  uint64_t seed;
  bool binarize;
} OccflowInputConfig;

/**
 * Frame and architecture of a loaded model.
 */
typedef struct {
  double roi_w_m;
  double roi_h_m;
  double cell_m;
  double horizon_s;
  double label_dt_s;
  uint32_t history;
  uint32_t channels;
  uint32_t k;
  bool has_implicit;
  bool has_explicit;
} OccflowModelInfo;

/**
 * A query in the ego frame: meters and seconds into the future.
 */
typedef struct {
  double x;
  double y;
  double t;
} OccflowQuery;

/**
 * Flow is backwards, in meters per label step.
 */
typedef struct {
  double occ_prob;
  double occ_logit;
  double flow_dx;
  double flow_dy;
} OccflowPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version string of the library, static and NUL-terminated.
 */
const char *occflow_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * in bytes excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t occflow_last_error_message(char *buf, size_t len);

/**
 * Defaults matching the `sensor` and `encode` sections of a default run
 * configuration.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
OccflowStatus occflow_input_config_default(OccflowInputConfig *out);

/**
 * Loads the checkpoint directory `dir`.
 *
 * # Safety
 * `dir` must be null or a NUL-terminated string; `out` must be null or
 * valid for writes.
 */
OccflowStatus occflow_model_load(const char *dir, OccflowModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`occflow_model_load`] not yet freed.
 */
void occflow_model_free(OccflowModel *model);

/**
 * # Safety
 * `model` must be null or a live handle; `out` must be null or valid for writes.
 */
OccflowStatus occflow_model_info(const OccflowModel *model, OccflowModelInfo *out);

/**
 * Simulates LiDAR for the scenario JSON at `scenario_path`, voxelizes it
 * in the model's frame and runs the encoder. `input` may be null for
 * defaults.
 *
 * # Safety
 * Pointers must be null or valid; `scenario_path` NUL-terminated.
 */
OccflowStatus occflow_encode_scenario(const OccflowModel *model,
                                      const char *scenario_path,
                                      const OccflowInputConfig *input,
                                      OccflowFeatures **out);

/**
 * # Safety
 * `features` must be null or a handle from [`occflow_encode_scenario`] not yet freed.
 */
void occflow_features_free(OccflowFeatures *features);

/**
 * Decodes `n` queries into `out`. The explicit decoder interpolates its
 * dense grids and rejects queries outside their extent.
 *
 * # Safety
 * `queries` must point to `n` readable queries and `out` to `n` writable
 * predictions; handles must be live.
 */
OccflowStatus occflow_decode(const OccflowModel *model,
                             const OccflowFeatures *features,
                             OccflowDecoder decoder,
                             const OccflowQuery *queries,
                             size_t n,
                             OccflowPrediction *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OCCFLOW_H */
