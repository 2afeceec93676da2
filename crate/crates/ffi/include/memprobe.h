#ifndef MEMPROBE_H
#define MEMPROBE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MP_PROBE_L1 1

#define MP_PROBE_CACHE 2

#define MP_PROBE_TLB 4

#define MP_PROBE_ALL 7

typedef enum MpStatus {
  MP_STATUS_OK = 0,
  MP_STATUS_NULL_ARGUMENT = 1,
  MP_STATUS_INVALID_UTF8 = 2,
  MP_STATUS_INVALID_GEOMETRY = 3,
  MP_STATUS_INVALID_RANGE = 4,
  MP_STATUS_TIMER_TOO_COARSE = 5,
  MP_STATUS_BUDGET_EXCEEDED = 6,
  MP_STATUS_ALLOCATION_FAILURE = 7,
  MP_STATUS_NOT_FOUND = 8,
  MP_STATUS_DEGENERATE_CURVE = 9,
  MP_STATUS_CONFIG_INVALID = 10,
  MP_STATUS_PARSE = 11,
  MP_STATUS_IO = 12,
  MP_STATUS_OUT_OF_BOUNDS = 13,
  MP_STATUS_PANIC = 14,
} MpStatus;

/*
 Probe tunables; starts at the library defaults.
 */
typedef struct MpOptions MpOptions;

/*
 Result of a characterization run.
 */
typedef struct MpReport MpReport;

/*
 Simulated machine description.
 */
typedef struct MpSimConfig MpSimConfig;

typedef struct MpL1Info {
  size_t capacity;
  size_t associativity;
  size_t linesize;
  uint32_t latency;
} MpL1Info;

typedef struct MpCacheLevel {
  size_t level;
  size_t effective_capacity;
  uint32_t latency;
} MpCacheLevel;

typedef struct MpTlbLevel {
  size_t level;
  size_t capacity;
  size_t entries;
} MpTlbLevel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or NULL after a
 success. Valid until the next call on the same thread.
 */
const char *mp_last_error(void);

/*
 Static NUL-terminated name of `status`.
 */
const char *mp_status_name(enum MpStatus status);

const char *mp_version(void);

/*
 Releases a string returned by this library. NULL is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void mp_string_free(char *s);

/*
 Parses a TOML simulator description.

 # Safety
 `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum MpStatus mp_sim_config_from_toml(const char *toml, struct MpSimConfig **out);

/*
 Loads a TOML simulator description from a file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MpStatus mp_sim_config_from_file(const char *path, struct MpSimConfig **out);

/*
 # Safety
 `config` must come from this library and not have been freed. NULL is ignored.
 */
void mp_sim_config_free(struct MpSimConfig *config);

/*
 Average cycles per access of the gap string G(n, gap, offset) on the
 simulated machine, over `traversals` laps after one warm-up lap.

 # Safety
 `config` must be a live handle; `out` must be writable.
 */
enum MpStatus mp_simulate_gap(const struct MpSimConfig *config,
                              size_t n,
                              size_t gap,
                              size_t offset,
                              size_t traversals,
                              double *out);

/*
 New options set to the library defaults. Never NULL.
 */
struct MpOptions *mp_options_new(void);

/*
 # Safety
 `options` must come from this library and not have been freed. NULL is ignored.
 */
void mp_options_free(struct MpOptions *options);

/*
 # Safety
 `options` must be a live handle.
 */
enum MpStatus mp_options_set_seed(struct MpOptions *options, uint64_t seed);

/*
 Runs without a new minimum before a value is accepted, and the run cap
 per value.

 # Safety
 `options` must be a live handle.
 */
enum MpStatus mp_options_set_stability(struct MpOptions *options, size_t window, size_t max_runs);

/*
 Gap range and associativity cap for the L1 probe.

 # Safety
 `options` must be a live handle.
 */
enum MpStatus mp_options_set_l1(struct MpOptions *options,
                                size_t lower,
                                size_t upper,
                                size_t max_assoc);

/*
 Footprint range for the cache sweep.

 # Safety
 `options` must be a live handle.
 */
enum MpStatus mp_options_set_cache_range(struct MpOptions *options, size_t lower, size_t upper);

/*
 Footprint range for the TLB sweep; both zero restores the default.

 # Safety
 `options` must be a live handle.
 */
enum MpStatus mp_options_set_tlb_range(struct MpOptions *options, size_t lower, size_t upper);

/*
 Disabling knockout measures every sample point to stability.

 # Safety
 `options` must be a live handle.
 */
enum MpStatus mp_options_set_knockout(struct MpOptions *options, bool enabled);

/*
 Characterizes the simulated machine. `options` may be NULL for defaults;
 `probes` is a mask of `MP_PROBE_*` bits.

 # Safety
 `config` must be a live handle; `options` NULL or live; `out` writable.
 */
enum MpStatus mp_probe_simulated(const struct MpSimConfig *config,
                                 const struct MpOptions *options,
                                 uint32_t probes,
                                 struct MpReport **out);

/*
 Characterizes the machine this process runs on.

 # Safety
 `options` must be NULL or live; `out` writable.
 */
enum MpStatus mp_probe_host(const struct MpOptions *options,
                            uint32_t probes,
                            struct MpReport **out);

/*
 Analyzes a response curve given as CSV text and returns a report holding
 only cache levels.

 # Safety
 `csv` must be a NUL-terminated string; `out` writable.
 */
enum MpStatus mp_analyze_curve_csv(const char *csv, struct MpReport **out);

/*
 # Safety
 `report` must come from this library and not have been freed. NULL is ignored.
 */
void mp_report_free(struct MpReport *report);

/*
 The report as pretty JSON; release with `mp_string_free`.

 # Safety
 `report` must be a live handle; `out` writable.
 */
enum MpStatus mp_report_to_json(const struct MpReport *report, char **out);

/*
 `MP_STATUS_NOT_FOUND` when the L1 probe did not run or found nothing.

 # Safety
 `report` must be a live handle; `out` writable.
 */
enum MpStatus mp_report_l1(const struct MpReport *report, struct MpL1Info *out);

/*
 Number of cache levels; 0 for a NULL report.

 # Safety
 `report` must be NULL or a live handle.
 */
size_t mp_report_cache_level_count(const struct MpReport *report);

/*
 # Safety
 `report` must be a live handle; `out` writable.
 */
enum MpStatus mp_report_cache_level(const struct MpReport *report,
                                    size_t index,
                                    struct MpCacheLevel *out);

/*
 Number of TLB levels; 0 for a NULL report.

 # Safety
 `report` must be NULL or a live handle.
 */
size_t mp_report_tlb_level_count(const struct MpReport *report);

/*
 # Safety
 `report` must be a live handle; `out` writable.
 */
enum MpStatus mp_report_tlb_level(const struct MpReport *report,
                                  size_t index,
                                  struct MpTlbLevel *out);

/*
 Number of warnings attached to the report; 0 for a NULL report.

 # Safety
 `report` must be NULL or a live handle.
 */
size_t mp_report_warning_count(const struct MpReport *report);

/*
 Copy of warning `index`; release with `mp_string_free`.

 # Safety
 `report` must be a live handle; `out` writable.
 */
enum MpStatus mp_report_warning(const struct MpReport *report, size_t index, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEMPROBE_H */
