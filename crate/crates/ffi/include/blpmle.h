#ifndef BLPMLE_H
#define BLPMLE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum BlpStatus {
  BLP_STATUS_OK = 0,
  // A required pointer argument was null.
  BLP_STATUS_NULL_POINTER = 1,
  // Bad option value, unknown scenario name, too-small output buffer.
  BLP_STATUS_INVALID_ARGUMENT = 2,
  // Unreadable file, schema violation, or inconsistent data.
  BLP_STATUS_DATA = 3,
  // Non-convergence, singular matrices, or every optimizer start failing.
  BLP_STATUS_NUMERICAL = 4,
  // A Rust panic was caught at the boundary.
  BLP_STATUS_PANIC = 5,
} BlpStatus;

typedef enum BlpEstimator {
  BLP_ESTIMATOR_MLE = 0,
  BLP_ESTIMATOR_GMM = 1,
} BlpEstimator;

// Opaque dataset handle.
typedef struct BlpDataset BlpDataset;

// Opaque estimation-result handle.
typedef struct BlpEstimate BlpEstimate;

// Options for [`blpmle_estimate`]. Obtain defaults from
// [`blpmle_estimate_options_default`] and override fields as needed.
typedef struct BlpEstimateOptions {
  enum BlpEstimator estimator;
  // Center of the region random starts are drawn from.
  double start_alpha;
  double start_sigma_x;
  double start_sigma_price;
  uint32_t n_starts;
  uint64_t seed;
  bool standard_errors;
  // Costs enter the supply equation in logs.
  bool log_linear_supply;
  // Treat every product as its own firm when recovering costs.
  bool single_product_firms;
} BlpEstimateOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version. The string is static.
const char *blpmle_version(void);

// Message for the most recent failure on this thread, or null if none.
// Valid until the next failing call on the same thread.
const char *blpmle_last_error_message(void);

// Read a dataset CSV (columns `market_id, firm_id, shares, prices, x*, w*`).
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum BlpStatus blpmle_dataset_read_csv(const char *path, struct BlpDataset **out);

// Draw a synthetic dataset from a named scenario (`no_cov`, `low_cov`,
// `high_cov`, `laplace_no_cov`, `laplace_low_cov`, `supply_misspec`,
// `ownership_misspec`).
//
// # Safety
// `scenario` must be a NUL-terminated string; `out` must be writable.
enum BlpStatus blpmle_dataset_simulate(const char *scenario,
                                       uint64_t seed,
                                       size_t n_markets,
                                       struct BlpDataset **out);

// Number of markets, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t blpmle_dataset_n_markets(const struct BlpDataset *dataset);

// Number of product-market observations, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t blpmle_dataset_n_observations(const struct BlpDataset *dataset);

// # Safety
// `dataset` must be null or a handle not yet freed.
void blpmle_dataset_free(struct BlpDataset *dataset);

// Concentrated log-likelihood at `(alpha, sigma_x, sigma_price)` under linear
// costs and the data's ownership. Any of the output pointers may be null.
//
// # Safety
// `dataset` must be a live handle; non-null outputs must be writable.
enum BlpStatus blpmle_concentrated_loglik(const struct BlpDataset *dataset,
                                          double alpha,
                                          double sigma_x,
                                          double sigma_price,
                                          double *out_total,
                                          double *out_covariance_term,
                                          double *out_jacobian_term);

struct BlpEstimateOptions blpmle_estimate_options_default(void);

// Estimate `(alpha, sigma_x, sigma_price)` on `dataset`. `options` may be
// null for defaults.
//
// # Safety
// `dataset` must be a live handle; `options` null or valid; `out` writable.
enum BlpStatus blpmle_estimate(const struct BlpDataset *dataset,
                               const struct BlpEstimateOptions *options,
                               struct BlpEstimate **out);

// Copy `(alpha, sigma_x, sigma_price)` into `out` (at least 3 slots).
//
// # Safety
// `estimate` must be a live handle; `out` must hold `len` doubles.
enum BlpStatus blpmle_estimate_theta(const struct BlpEstimate *estimate, double *out, size_t len);

// Copy the standard errors of `(alpha, sigma_x, sigma_price)` into `out`;
// NaN where unavailable.
//
// # Safety
// `estimate` must be a live handle; `out` must hold `len` doubles.
enum BlpStatus blpmle_estimate_standard_errors(const struct BlpEstimate *estimate,
                                               double *out,
                                               size_t len);

// Log-likelihood (MLE) or second-step objective (GMM); NaN for null.
//
// # Safety
// `estimate` must be null or a live handle.
double blpmle_estimate_objective(const struct BlpEstimate *estimate);

// # Safety
// `estimate` must be null or a live handle.
bool blpmle_estimate_converged(const struct BlpEstimate *estimate);

// Full result as JSON. The string is owned by the handle and lives until
// [`blpmle_estimate_free`].
//
// # Safety
// `estimate` must be null or a live handle.
const char *blpmle_estimate_json(const struct BlpEstimate *estimate);

// # Safety
// `estimate` must be null or a handle not yet freed.
void blpmle_estimate_free(struct BlpEstimate *estimate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLPMLE_H */
