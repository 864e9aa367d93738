#ifndef PIANOFLOW_H
#define PIANOFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_POINTER = 1,
  PF_STATUS_DIMENSION = 2,
  PF_STATUS_ARGUMENT = 3,
  PF_STATUS_NUMERICAL = 4,
  PF_STATUS_PARSE = 5,
  PF_STATUS_STATE = 6,
  PF_STATUS_CONFIG = 7,
  PF_STATUS_FORMAT = 8,
  PF_STATUS_IO = 9,
  PF_STATUS_BUFFER_TOO_SMALL = 10,
  PF_STATUS_PANIC = 11,
} PfStatus;

/**
 * A loaded stage-1 and stage-2 model pair.
 */
typedef struct PfPipeline PfPipeline;

/**
 * An in-progress chunked generation over one piano roll.
 */
typedef struct PfStream PfStream;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes, including the terminating NUL, of the last error on
 * this thread; 0 when the last call succeeded.
 */
size_t pf_last_error_length(void);

/**
 * Copies the last error message into `buf` (truncated, always
 * NUL-terminated when `capacity > 0`). Returns the full length including
 * the NUL.
 *
 * # Safety
 * `buf` must be null or point to `capacity` writable bytes.
 */
size_t pf_last_error_message(char *buf, size_t capacity);

/**
 * Static version string.
 */
const char *pf_version(void);

/**
 * Loads both checkpoints named by a JSON run configuration. A null
 * `config_path` uses the default configuration.
 *
 * # Safety
 * `config_path` must be null or a NUL-terminated string; `out` must be
 * writable.
 */
enum PfStatus pf_pipeline_open(const char *config_path, struct PfPipeline **out);

/**
 * Releases a pipeline. Streams opened from it stay valid.
 *
 * # Safety
 * `p` must be null or a handle from [`pf_pipeline_open`] not yet freed.
 */
void pf_pipeline_free(struct PfPipeline *p);

/**
 * Values per motion frame, or 0 for a null handle.
 *
 * # Safety
 * `p` must be null or a live pipeline handle.
 */
size_t pf_pipeline_frame_width(const struct PfPipeline *p);

/**
 * Generates `n_frames` of motion for a piano roll in one pass, writing
 * `n_frames × frame_width` values to `out`.
 *
 * # Safety
 * `roll` must hold `n_frames × 88` values and `out` `capacity` values.
 */
enum PfStatus pf_pipeline_generate(const struct PfPipeline *p,
                                   const float *roll,
                                   size_t n_frames,
                                   float *out,
                                   size_t capacity);

/**
 * Starts a chunked generation using the configured chunk and overlap.
 *
 * # Safety
 * `roll` must hold `n_frames × 88` values; `out` must be writable.
 */
enum PfStatus pf_stream_open(const struct PfPipeline *p,
                             const float *roll,
                             size_t n_frames,
                             struct PfStream **out);

/**
 * Produces the next finished frames. Writes their count to `out_frames`
 * and the index of the first one to `out_first`; a count of 0 means the
 * stream is complete. `capacity` must cover one chunk of frames.
 *
 * # Safety
 * `s` must be a live stream; the output pointers must be writable.
 */
enum PfStatus pf_stream_next(struct PfStream *s,
                             float *out,
                             size_t capacity,
                             size_t *out_frames,
                             size_t *out_first);

/**
 * Releases a stream.
 *
 * # Safety
 * `s` must be null or a handle from [`pf_stream_open`] not yet freed.
 */
void pf_stream_free(struct PfStream *s);

/**
 * Converts Standard MIDI File bytes into an `n × 88` roll at 30 frames/s.
 * Call with a null `out` to learn `n` first.
 *
 * # Safety
 * `bytes` must hold `len` readable bytes, `out` null or `capacity` values,
 * `out_frames` writable.
 */
enum PfStatus pf_midi_to_roll(const uint8_t *bytes,
                              size_t len,
                              float *out,
                              size_t capacity,
                              size_t *out_frames);

/**
 * Frequency-domain distance between two `n × d` sequences.
 *
 * # Safety
 * `pred` and `gt` must each hold `n × d` values; `out` must be writable.
 */
enum PfStatus pf_fde(const float *pred, const float *gt, size_t n, size_t d, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIANOFLOW_H */
