/* C interface to the dynamical low-rank training library.
 *
 * All functions return DLRT_OK on success; on failure they return a status
 * code and leave a human-readable message in dlrt_last_error() (thread-local).
 * Handles are opaque; destroy them with the matching *_destroy function.
 */
#ifndef DLRT_H
#define DLRT_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dlrt_status {
  DLRT_OK = 0,
  DLRT_ERR_CONFIG = 2,  /* invalid configuration or arguments */
  DLRT_ERR_NUMERIC = 3, /* numeric failure (non-finite values, stiffness) */
  DLRT_ERR_VERIFY = 4,  /* verification suite reported a failure */
  DLRT_ERR_IO = 5,      /* file I/O or checkpoint integrity failure */
  DLRT_ERR_UNKNOWN = 6
} dlrt_status;

const char* dlrt_version(void);

/* Message for the most recent failure on this thread; never NULL. */
const char* dlrt_last_error(void);

typedef struct dlrt_config dlrt_config;

dlrt_config* dlrt_config_create(void);
void dlrt_config_destroy(dlrt_config* cfg);

/* Load a flat JSON object of config fields, replacing current values. */
dlrt_status dlrt_config_load_file(dlrt_config* cfg, const char* path);

/* Set one field from its string form, e.g. ("optimizer", "lr-adam") or
 * ("lambda", "0.05"). Unknown keys and malformed values are config errors. */
dlrt_status dlrt_config_set(dlrt_config* cfg, const char* key,
                            const char* value);

typedef struct dlrt_metrics {
  long step;
  double loss;
  double val_metric;
  long total_params;
  double compression_ratio;
  int max_rank; /* largest per-layer rank at the final step */
} dlrt_metrics;

/* Run one training experiment; writes metrics.csv and a checkpoint into the
 * configured out_dir. `out` may be NULL. */
dlrt_status dlrt_train(const dlrt_config* cfg, dlrt_metrics* out);

/* Run each optimizer in the comma-separated list on the configured task and
 * write a joined compare.csv under out_dir. */
dlrt_status dlrt_compare(const dlrt_config* cfg, const char* optimizers_csv);

/* Gradient-flow studies; writes energy.csv and scaling.csv under out_dir and
 * a summary into `summary` (truncated to summary_len, may be NULL). */
dlrt_status dlrt_flow_study(const dlrt_config* cfg, char* summary,
                            size_t summary_len);

/* Property verification suite. Returns DLRT_ERR_VERIFY if any check
 * fails; the per-check report is written into `report` (may be NULL). */
dlrt_status dlrt_verify(char* report, size_t report_len);

dlrt_status dlrt_compression_ratio(long lr_params, long baseline_params,
                                   double* out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* DLRT_H */
