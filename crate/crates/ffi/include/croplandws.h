#ifndef CROPLANDWS_H
#define CROPLANDWS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. The error values equal the command-line
// exit codes.
typedef enum CwsStatus {
  CWS_STATUS_OK = 0,
  // Bad configuration or argument.
  CWS_STATUS_CONFIG = 2,
  // Unreadable, missing or inconsistent data.
  CWS_STATUS_DATA = 3,
  // Failure while computing (divergence, I/O while writing).
  CWS_STATUS_RUNTIME = 4,
  // A required pointer was null or a string was not UTF-8.
  CWS_STATUS_INVALID_ARGUMENT = 5,
  // The library panicked; the handle involved should be discarded.
  CWS_STATUS_PANIC = 6,
} CwsStatus;

// A trained model loaded from disk.
typedef struct CwsCheckpoint CwsCheckpoint;

// Accuracy percentages of a binary map; see `cws_evaluate`.
typedef struct CwsReport {
  double oa;
  double miou;
  double avg_f1;
  double crop_f1;
  double noncrop_f1;
  double pa_crop;
  double ua_crop;
  double pa_noncrop;
  double ua_noncrop;
  // Confusion counts, rows = reference (non-crop, crop), columns = prediction.
  uint64_t counts[4];
} CwsReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next call into the library on this thread.
const char *cws_last_error(void);

// Library version as a static NUL-terminated string.
const char *cws_version(void);

// Loads a checkpoint written by `croplandws train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CwsStatus cws_checkpoint_load(const char *path, struct CwsCheckpoint **out);

// Releases a checkpoint. NULL is ignored.
//
// # Safety
// `ck` must come from `cws_checkpoint_load` and not be used afterwards.
void cws_checkpoint_free(struct CwsCheckpoint *ck);

// Spectral channels and temporal positions the model expects.
//
// # Safety
// `ck` must be a live handle; `channels` and `frames` valid pointers.
enum CwsStatus cws_checkpoint_shape(const struct CwsCheckpoint *ck,
                                    size_t *channels,
                                    size_t *frames);

// Predicts one tile.
//
// `frames` holds `t·c·h·w` reflectances ordered [T, C, H, W]; `validity`
// holds `t·h·w` flags (nonzero = usable); `period_labels` holds `t`
// one-based period numbers (months for monthly composites). On success
// `probs` receives `2·h·w` values ordered [K, H, W], non-crop first.
//
// # Safety
// All pointers must reference arrays of the stated lengths.
enum CwsStatus cws_predict_tile(const struct CwsCheckpoint *ck,
                                const double *frames,
                                const uint8_t *validity,
                                const uint32_t *period_labels,
                                size_t t,
                                size_t c,
                                size_t h,
                                size_t w,
                                double *probs);

// Maps a whole dataset with sliding windows and writes `probs.tif` and
// `map.tif` into `out_dir`.
//
// # Safety
// `ck` must be a live handle; the paths NUL-terminated strings.
enum CwsStatus cws_map_dataset(const struct CwsCheckpoint *ck,
                               const char *manifest_path,
                               const char *out_dir);

// Cross-product quality rating.
//
// `layers` holds `m·h·w` binary labels ordered [M, H, W] (0, 1, or 255
// for no data). `mask` receives 1 where all products agree, `labels` the
// agreed label there and 255 elsewhere; both hold `h·w` bytes.
//
// # Safety
// All pointers must reference arrays of the stated lengths.
enum CwsStatus cws_rate_quality(const uint8_t *layers,
                                size_t m,
                                size_t h,
                                size_t w,
                                uint8_t *mask,
                                uint8_t *labels);

// Scores a binary map against a reference over the pixels that are not
// 255 in either raster.
//
// # Safety
// `pred` and `reference` must hold `h·w` bytes; `out` must be valid.
enum CwsStatus cws_evaluate(const uint8_t *pred,
                            const uint8_t *reference,
                            size_t h,
                            size_t w,
                            struct CwsReport *out);

// Runs the command-line tool in-process with `argc` arguments (the first
// being the program name) and returns its exit code.
//
// # Safety
// `argv` must hold `argc` NUL-terminated strings.
int32_t cws_run_cli(size_t argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROPLANDWS_H */
