/* C interface to the photonstat library. */

#ifndef PHOTONSTAT_H
#define PHOTONSTAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef struct PsStream PsStream;
typedef struct PsHistogram PsHistogram;

/**
 * Result of every fallible call.
 */
typedef enum PsStatus {
  /**
   * Success.
   */
  PS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PS_STATUS_NULL_ARG = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  PS_STATUS_UTF8 = 2,
  /**
   * File or stream I/O failed.
   */
  PS_STATUS_IO = 3,
  /**
   * Invalid configuration or parameters.
   */
  PS_STATUS_CONFIG = 4,
  /**
   * The analysis could not produce a result.
   */
  PS_STATUS_ANALYSIS = 5,
  /**
   * An internal panic was caught.
   */
  PS_STATUS_PANIC = 6,
} PsStatus;

/**
 * Message behind the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ps_last_error(void);

/**
 * Library version as a static string.
 */
const char *ps_version(void);

/**
 * Reads a PSTR file into a new stream handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum PsStatus ps_stream_read(const char *path, PsStream **out);

/**
 * Writes a stream handle to a PSTR file.
 *
 * # Safety
 * `stream` must come from this library; `path` must be NUL-terminated.
 */
enum PsStatus ps_stream_write(const PsStream *stream, const char *path);

/**
 * Simulates a photon stream from a JSON-encoded configuration. Absent
 * fields take their defaults, so `"{}"` is a valid configuration.
 *
 * # Safety
 * `config_json` must be NUL-terminated; `out` must be a valid pointer.
 */
enum PsStatus ps_stream_simulate(const char *config_json, PsStream **out);

/**
 * Frees a stream handle; null is ignored.
 *
 * # Safety
 * `stream` must come from this library and not be used afterwards.
 */
void ps_stream_free(PsStream *stream);

/**
 * Number of photon records in the stream.
 *
 * # Safety
 * `stream` must be a live handle from this library.
 */
uint64_t ps_stream_record_count(const PsStream *stream);

/**
 * Acquisition duration in seconds.
 *
 * # Safety
 * `stream` must be a live handle from this library.
 */
double ps_stream_duration(const PsStream *stream);

/**
 * Excitation sync rate in Hz.
 *
 * # Safety
 * `stream` must be a live handle from this library.
 */
double ps_stream_sync_rate(const PsStream *stream);

/**
 * Correlates two channels into a pulsed (linear, signed-delay) histogram.
 *
 * # Safety
 * `stream` must be a live handle; `out` must be a valid pointer.
 */
enum PsStatus ps_g2_pulsed(const PsStream *stream,
                           uint8_t channel_a,
                           uint8_t channel_b,
                           double bin_width,
                           double span,
                           PsHistogram **out);

/**
 * Correlates two channels into a logarithmic long-delay histogram.
 *
 * # Safety
 * `stream` must be a live handle; `out` must be a valid pointer.
 */
enum PsStatus ps_g2_long(const PsStream *stream,
                         uint8_t channel_a,
                         uint8_t channel_b,
                         double tau_min,
                         double tau_max,
                         size_t bins_per_decade,
                         PsHistogram **out);

/**
 * Frees a histogram handle; null is ignored.
 *
 * # Safety
 * `hist` must come from this library and not be used afterwards.
 */
void ps_histogram_free(PsHistogram *hist);

/**
 * Number of delay bins in the histogram.
 *
 * # Safety
 * `hist` must be a live handle from this library.
 */
size_t ps_histogram_len(const PsHistogram *hist);

/**
 * Copies the delay axis, counts, and normalized g2 into caller buffers.
 * Any of the three buffers may be null to skip that column; non-null
 * buffers must hold at least `ps_histogram_len` elements, declared via
 * `cap`.
 *
 * # Safety
 * `hist` must be a live handle; non-null buffers must be writable for
 * `cap` elements.
 */
enum PsStatus ps_histogram_copy(const PsHistogram *hist,
                                double *tau,
                                uint64_t *counts,
                                double *g2,
                                size_t cap);

/**
 * Extracts single-photon purity from a pulsed histogram. `correction` is
 * 0 none, 1 plateau subtraction, 2 amplitude subtraction. Output pointers
 * may be null to skip a value.
 *
 * # Safety
 * `hist` must be a live handle; non-null outputs must be writable.
 */
enum PsStatus ps_histogram_purity(const PsHistogram *hist,
                                  int32_t correction,
                                  double *g2_raw,
                                  double *g2_corrected,
                                  double *uncertainty);

/**
 * Bins the stream into an intensity trace. Call with a null `out` buffer
 * to query the bin count through `len`; call again with a buffer of at
 * least that many elements.
 *
 * # Safety
 * `stream` must be a live handle; `len` must be valid; a non-null `out`
 * must be writable for `cap` elements.
 */
enum PsStatus ps_intensity_trace(const PsStream *stream,
                                 double bin_time,
                                 uint64_t *out,
                                 size_t cap,
                                 size_t *len);

#endif /* PHOTONSTAT_H */
