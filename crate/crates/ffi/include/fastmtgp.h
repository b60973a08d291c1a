#ifndef FASTMTGP_H
#define FASTMTGP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FmtStatus {
  FMT_STATUS_OK = 0,
  FMT_STATUS_NULL_POINTER = 1,
  FMT_STATUS_INVALID_ARGUMENT = 2,
  // Observations missing for at least one task.
  FMT_STATUS_NOT_READY = 3,
  // Factorization failure or non-finite loss.
  FMT_STATUS_NUMERICAL = 4,
  FMT_STATUS_BUFFER_TOO_SMALL = 5,
  FMT_STATUS_PANIC = 6,
} FmtStatus;

typedef enum FmtKernel {
  FMT_KERNEL_SI_LATTICE = 0,
  FMT_KERNEL_DSI_DIGITAL = 1,
  FMT_KERNEL_SE_DENSE = 2,
} FmtKernel;

// Opaque model handle.
typedef struct FmtModel FmtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Creates a model on a randomly shifted low-discrepancy design.
//
// # Safety
// `sizes` must point to `num_tasks` readable values and `out` must be a
// valid location for a handle pointer.
enum FmtStatus fmt_model_create(enum FmtKernel kernel,
                                size_t dim,
                                const size_t *sizes,
                                size_t num_tasks,
                                uint64_t seed,
                                double noise,
                                struct FmtModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from [`fmt_model_create`] and not be used afterwards.
void fmt_model_free(struct FmtModel *model);

// Number of samples of `task`.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum FmtStatus fmt_model_task_size(struct FmtModel *model, size_t task, size_t *out);

// Copies the row-major `n × dim` points of `task` into `buf`.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum FmtStatus fmt_model_points(struct FmtModel *model, size_t task, double *buf, size_t len);

// Sets the observations of `task`, one per design point.
//
// # Safety
// `y` must point to `len` readable doubles.
enum FmtStatus fmt_model_set_observations(struct FmtModel *model,
                                          size_t task,
                                          const double *y,
                                          size_t len);

// Runs `steps` optimizer iterations; writes the final loss when `loss` is
// not null.
//
// # Safety
// `model` must be a live handle; `loss` null or writable.
enum FmtStatus fmt_model_fit(struct FmtModel *model, size_t steps, double *loss);

// Posterior mean and variance of `task` at `count` row-major points.
// `var` may be null.
//
// # Safety
// `x` must hold `count × dim` doubles; `mean` and `var` (if not null)
// `count` doubles each.
enum FmtStatus fmt_model_posterior(struct FmtModel *model,
                                   size_t task,
                                   const double *x,
                                   size_t count,
                                   double *mean,
                                   double *var);

// Integral estimates `μ̂` (length L) and their covariance `Σ` (row-major
// L × L, may be null).
//
// # Safety
// `mu` must hold `num_tasks` doubles and `sigma` (if not null) its square.
enum FmtStatus fmt_model_cubature(struct FmtModel *model, double *mu, double *sigma);

// Copies the calling thread's last error message, NUL terminated and
// truncated to `len` bytes. Returns the full message length excluding the
// terminator, or 0 when there is no message.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t fmt_last_error_message(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FASTMTGP_H */
