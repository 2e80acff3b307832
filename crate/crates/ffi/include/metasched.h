/* C interface to the metasched learning-rate schedulers. */

#ifndef METASCHED_H
#define METASCHED_H

/* Generated by cbindgen from metasched-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum MsdStatus {
  MSD_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MSD_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  MSD_STATUS_INVALID_UTF8 = 2,
  /**
   * Input violated a mathematical precondition.
   */
  MSD_STATUS_DOMAIN = 3,
  /**
   * Tensor shapes did not line up.
   */
  MSD_STATUS_SHAPE = 4,
  /**
   * API misuse (wrong observations fed to a scheduler, stale cache).
   */
  MSD_STATUS_USAGE = 5,
  /**
   * Training produced a non-finite value.
   */
  MSD_STATUS_DIVERGENCE = 6,
  /**
   * Configuration or spec is inconsistent.
   */
  MSD_STATUS_CONFIG = 7,
  /**
   * Checkpoint file carries an unsupported format version.
   */
  MSD_STATUS_INCOMPATIBLE = 8,
  /**
   * File contents could not be parsed.
   */
  MSD_STATUS_PARSE = 9,
  /**
   * Malformed CSV data.
   */
  MSD_STATUS_CSV = 10,
  /**
   * Filesystem error.
   */
  MSD_STATUS_IO = 11,
  /**
   * Unexpected internal failure.
   */
  MSD_STATUS_INTERNAL = 12,
} MsdStatus;

/**
 * A loaded meta-net checkpoint: parameters plus run provenance.
 */
typedef struct MsdCheckpoint MsdCheckpoint;

/**
 * A stateful learning-rate source. Not thread-safe; serialize calls.
 */
typedef struct MsdSchedule MsdSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on the calling thread, empty
 * when the last call succeeded. The pointer stays valid until the next
 * call into this library from the same thread.
 */
const char *msd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *msd_version(void);

/**
 * Loads a meta-net checkpoint from a JSON file written by the trainer.
 * On success writes a new handle to `out`; free it with
 * `msd_checkpoint_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum MsdStatus msd_checkpoint_load(const char *path, struct MsdCheckpoint **out);

/**
 * Releases a checkpoint handle. Null is a no-op.
 *
 * # Safety
 * `ck` must be null or a pointer from `msd_checkpoint_load` not yet freed.
 */
void msd_checkpoint_free(struct MsdCheckpoint *ck);

/**
 * Hidden size of the checkpointed meta-net.
 *
 * # Safety
 * `ck` must be a live checkpoint handle; `out` valid for writes.
 */
enum MsdStatus msd_checkpoint_hidden_size(const struct MsdCheckpoint *ck, size_t *out);

/**
 * Upper bound gamma of the checkpoint's learning-rate range (0, gamma).
 *
 * # Safety
 * `ck` must be a live checkpoint handle; `out` valid for writes.
 */
enum MsdStatus msd_checkpoint_gamma(const struct MsdCheckpoint *ck, double *out);

/**
 * Number of meta-net parameters in the checkpoint.
 *
 * # Safety
 * `ck` must be a live checkpoint handle; `out` valid for writes.
 */
enum MsdStatus msd_checkpoint_num_params(const struct MsdCheckpoint *ck, size_t *out);

/**
 * Training step at which the checkpoint was written.
 *
 * # Safety
 * `ck` must be a live checkpoint handle; `out` valid for writes.
 */
enum MsdStatus msd_checkpoint_step(const struct MsdCheckpoint *ck, uint64_t *out);

/**
 * Seed of the run that produced the checkpoint.
 *
 * # Safety
 * `ck` must be a live checkpoint handle; `out` valid for writes.
 */
enum MsdStatus msd_checkpoint_seed(const struct MsdCheckpoint *ck, uint64_t *out);

/**
 * Builds a frozen meta-net schedule from a loaded checkpoint. The handle
 * starts with zeroed recurrent state and advances it on every
 * `msd_schedule_lr` call. The checkpoint handle stays owned by the caller
 * and may be freed immediately after this call. Free the schedule with
 * `msd_schedule_free`.
 *
 * # Safety
 * `ck` must be a live checkpoint handle; `out` valid for writes.
 */
enum MsdStatus msd_schedule_from_checkpoint(const struct MsdCheckpoint *ck,
                                            struct MsdSchedule **out);

/**
 * Builds a schedule from a spec JSON object, e.g.
 * `{"kind":"exponential","lr0":0.1,"rate":0.95}` or
 * `{"kind":"frozen-meta-net","checkpoints":["net.json"]}`. Supported kinds:
 * fixed, exponential, multi-step, sgdr, hd, frozen-meta-net.
 * `steps_per_epoch` feeds restart bookkeeping for sgdr; pass the training
 * loop's value, or 1 when irrelevant.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` valid for writes.
 */
enum MsdStatus msd_schedule_from_json(const char *json,
                                      uint64_t steps_per_epoch,
                                      struct MsdSchedule **out);

/**
 * Releases a schedule handle. Null is a no-op.
 *
 * # Safety
 * `s` must be null or a pointer from a schedule constructor not yet freed.
 */
void msd_schedule_free(struct MsdSchedule *s);

/**
 * Learning rate for training step `step` in `epoch`, advancing the
 * handle's state. `observed_loss` is the current training loss; it drives
 * frozen meta-net schedules and is ignored by the classical ones.
 * Hypergradient-descent schedules need the gradient variant instead.
 *
 * # Safety
 * `s` must be a live schedule handle; `out` valid for writes.
 */
enum MsdStatus msd_schedule_lr(struct MsdSchedule *s,
                               uint64_t step,
                               uint64_t epoch,
                               double observed_loss,
                               double *out);

/**
 * Like `msd_schedule_lr`, additionally passing the current flat gradient
 * (`grad`, length `grad_len`) for schedules that consume it
 * (hypergradient descent).
 *
 * # Safety
 * `s` must be a live schedule handle; `grad` must point to `grad_len`
 * readable doubles; `out` valid for writes.
 */
enum MsdStatus msd_schedule_lr_with_grad(struct MsdSchedule *s,
                                         uint64_t step,
                                         uint64_t epoch,
                                         double observed_loss,
                                         const double *grad,
                                         size_t grad_len,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METASCHED_H */
