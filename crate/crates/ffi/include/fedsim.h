#ifndef FEDSIM_H
#define FEDSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedsimStatus {
  FEDSIM_STATUS_OK = 0,
  FEDSIM_STATUS_NULL_POINTER = 1,
  FEDSIM_STATUS_INVALID_UTF8 = 2,
  FEDSIM_STATUS_CONFIG = 3,
  FEDSIM_STATUS_CONTRACT = 4,
  FEDSIM_STATUS_OUT_OF_RANGE = 5,
  FEDSIM_STATUS_IO = 6,
  FEDSIM_STATUS_PANIC = 7,
} FedsimStatus;

// Column selector for [`fedsim_run_metric`].
typedef enum FedsimMetric {
  FEDSIM_METRIC_ROUND = 0,
  FEDSIM_METRIC_TRAIN_LOSS = 1,
  FEDSIM_METRIC_TEST_ACCURACY = 2,
  FEDSIM_METRIC_GRAD_NORM = 3,
  FEDSIM_METRIC_SHARPNESS = 4,
  FEDSIM_METRIC_PERTURBATION_DRIFT = 5,
  FEDSIM_METRIC_ESTIMATION_ERROR = 6,
  FEDSIM_METRIC_LEARNING_RATE = 7,
} FedsimMetric;

// Parsed experiment config.
typedef struct FedsimConfig FedsimConfig;

// Result of a finished (or diverged) run.
typedef struct FedsimRun FedsimRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next fedsim call on the same thread.
const char *fedsim_last_error(void);

// Parses a TOML config. On success `*out` receives a new handle.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum FedsimStatus fedsim_config_parse(const char *toml, struct FedsimConfig **out);

// # Safety
// `config` must come from [`fedsim_config_parse`] and not be freed twice.
void fedsim_config_free(struct FedsimConfig *config);

// Hex SHA-256 of the canonical config text, owned by the handle.
//
// # Safety
// `config` must be a live handle or null.
const char *fedsim_config_hash(const struct FedsimConfig *config);

// Runs the experiment to completion or divergence. A diverged run still
// returns [`FedsimStatus::Ok`] and a handle; see [`fedsim_run_diverged_round`].
//
// # Safety
// `config` must be a live handle; `out` must be writable.
enum FedsimStatus fedsim_run(const struct FedsimConfig *config, struct FedsimRun **out);

// # Safety
// `run` must come from [`fedsim_run`] and not be freed twice.
void fedsim_run_free(struct FedsimRun *run);

// Round whose update diverged, or -1 when the run completed.
//
// # Safety
// `run` must be a live handle or null.
int64_t fedsim_run_diverged_round(const struct FedsimRun *run);

// Number of rounds completed.
//
// # Safety
// `run` must be a live handle or null.
uintptr_t fedsim_run_rounds(const struct FedsimRun *run);

// Number of metric rows recorded.
//
// # Safety
// `run` must be a live handle or null.
uintptr_t fedsim_run_metric_rows(const struct FedsimRun *run);

// Reads one metric cell. Values that were not computed come back as NaN.
//
// # Safety
// `run` must be a live handle; `out` must be writable.
enum FedsimStatus fedsim_run_metric(const struct FedsimRun *run,
                                    uintptr_t row,
                                    enum FedsimMetric column,
                                    double *out);

// Length of the final parameter vector.
//
// # Safety
// `run` must be a live handle or null.
uintptr_t fedsim_run_param_count(const struct FedsimRun *run);

// Copies the final parameters into `buf`, which must hold exactly
// [`fedsim_run_param_count`] values.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum FedsimStatus fedsim_run_params(const struct FedsimRun *run, double *buf, uintptr_t len);

// Metrics as CSV text. Free the result with [`fedsim_string_free`].
// Returns null on failure.
//
// # Safety
// `run` must be a live handle or null.
char *fedsim_run_metrics_csv(const struct FedsimRun *run);

// # Safety
// `s` must come from a fedsim function documented to need this call.
void fedsim_string_free(char *s);

// Globally estimated perturbation `rho (w_old - w_t) / ‖w_old - w_t‖`
// written to `out`; zeros when the two models coincide.
//
// # Safety
// All three buffers must hold `len` doubles.
enum FedsimStatus fedsim_global_perturbation(const double *w_old,
                                             const double *w_t,
                                             uintptr_t len,
                                             double rho,
                                             double *out);

// Local SAM perturbation `rho g / ‖g‖`; zeros for a vanishing gradient.
//
// # Safety
// Both buffers must hold `len` doubles.
enum FedsimStatus fedsim_local_perturbation(const double *grad,
                                            uintptr_t len,
                                            double rho,
                                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDSIM_H */
