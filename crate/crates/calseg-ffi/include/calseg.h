#ifndef CALSEG_H
#define CALSEG_H

/* Generated by cbindgen from the calseg-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum CalsegStatus {
  // The call succeeded and all out-pointers are populated.
  CALSEG_STATUS_OK = 0,
  // A required pointer was null.
  CALSEG_STATUS_NULL_POINTER = 1,
  // Inputs violated a documented precondition.
  CALSEG_STATUS_INVALID_ARGUMENT = 2,
  // The computation failed numerically.
  CALSEG_STATUS_NUMERIC_ERROR = 3,
} CalsegStatus;

// Opaque calibration report over one prediction stream. Create with
// [`calseg_calibration_new`], read through the getters, release with
// [`calseg_calibration_free`].
typedef struct CalsegCalibration CalsegCalibration;

// Result of a temperature-scaling fit.
typedef struct CalsegTemperatureFit {
  // Fitted scalar temperature, always positive.
  double temperature;
  // Mean negative log-likelihood before scaling.
  double nll_uncalibrated;
  // Mean negative log-likelihood at the fitted temperature; never
  // above the uncalibrated value.
  double nll_calibrated;
  // Equal-width calibration error on the fitting stream after scaling.
  double ece_calibrated;
} CalsegTemperatureFit;

// Measured inputs of the two generalization bounds.
typedef struct CalsegBoundInputs {
  // Empirical error fraction in [0, 1].
  double emp_error;
  // Nonnegative feature Fisher information trace.
  double fisher_trace;
  // Sample count, at least 1.
  size_t n;
  // Failure probability in (0, 1).
  double delta;
  // Overconfidence term in [0, 1].
  double epsilon;
  // Positive constant of the calibration bound; 1.0 is the reporting
  // convention.
  double c_constant;
} CalsegBoundInputs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the calling thread's most recent failure, empty
// before any failure. The pointer stays valid until the next failing
// call on the same thread.
const char *calseg_last_error(void);

// Crate version as a static nul-terminated string.
const char *calseg_version(void);

// Dice overlap of two binary masks with extents `dims = [nx, ny, nz]`;
// both buffers hold `nx * ny * nz` voxels of 0 or 1, x-fastest. Two
// empty masks score 1.0.
//
// # Safety
// `pred` and `truth` must point to `nx * ny * nz` readable bytes and
// `dims` to three readable `size_t`s; `out` must be writable.
enum CalsegStatus calseg_dsc(const uint8_t *pred,
                             const uint8_t *truth,
                             const size_t *dims,
                             double *out);

// 95th-percentile symmetric surface distance in millimeters between two
// binary masks, honoring anisotropic voxel `spacing` (mm per axis). When
// either mask is empty the distance is undefined: `*defined` is set to
// false and `*out` to NaN, with an `Ok` status.
//
// # Safety
// Pointer contracts as in [`calseg_dsc`], plus `spacing` must point to
// three readable doubles and `defined` must be writable.
enum CalsegStatus calseg_hd95(const uint8_t *pred,
                              const uint8_t *truth,
                              const size_t *dims,
                              const double *spacing,
                              double *out,
                              bool *defined);

// Builds a calibration report from `n` foreground probabilities in
// [0, 1] and matching 0/1 labels, using `bins` bins for both the
// equal-width and equal-mass estimators. Returns null on failure; see
// [`calseg_last_error`].
//
// # Safety
// `probs` must point to `n` readable doubles and `labels` to `n`
// readable bytes.
struct CalsegCalibration *calseg_calibration_new(const double *probs,
                                                 const uint8_t *labels,
                                                 size_t n,
                                                 size_t bins);

// Expected calibration error (equal-width binning). NaN on a null handle.
//
// # Safety
// `handle` must be null or a live pointer from [`calseg_calibration_new`].
double calseg_calibration_ece(const struct CalsegCalibration *handle);

// Adaptive calibration error (equal-mass binning). NaN on a null handle.
//
// # Safety
// As in [`calseg_calibration_ece`].
double calseg_calibration_ace(const struct CalsegCalibration *handle);

// Brier score. NaN on a null handle.
//
// # Safety
// As in [`calseg_calibration_ece`].
double calseg_calibration_brier(const struct CalsegCalibration *handle);

// Number of equal-width bins in the report; 0 on a null handle.
//
// # Safety
// As in [`calseg_calibration_ece`].
size_t calseg_calibration_bin_count(const struct CalsegCalibration *handle);

// Copies one equal-width bin: half-open range `[lo, hi)` (closed at 1.0
// for the last bin), member count, and the bin's mean accuracy and
// confidence (both 0 for an empty bin).
//
// # Safety
// `handle` as in [`calseg_calibration_ece`]; the five out-pointers must
// be writable.
enum CalsegStatus calseg_calibration_bin(const struct CalsegCalibration *handle,
                                         size_t index,
                                         double *lo,
                                         double *hi,
                                         size_t *count,
                                         double *accuracy,
                                         double *confidence);

// Releases a report handle. Null is ignored.
//
// # Safety
// `handle` must be null or a pointer from [`calseg_calibration_new`]
// that has not been freed yet; it is invalid afterwards.
void calseg_calibration_free(struct CalsegCalibration *handle);

// Fits one temperature on `n` logits with 0/1 labels by minimizing the
// negative log-likelihood, searching T in [0.05, 20]. Labels must
// contain both classes.
//
// # Safety
// `logits` must point to `n` readable doubles, `labels` to `n` readable
// bytes, and `out` must be writable.
enum CalsegStatus calseg_temperature_fit(const double *logits,
                                         const uint8_t *labels,
                                         size_t n,
                                         size_t bins,
                                         struct CalsegTemperatureFit *out);

// Generalization bound: `emp_error + sqrt((0.5 * I + ln(1/delta)) / (2n))`.
//
// # Safety
// `inputs` must be readable and `out` writable.
enum CalsegStatus calseg_pac_bayes_bound(const struct CalsegBoundInputs *inputs, double *out);

// Calibration bound: `sqrt(I / n) + epsilon + C * ln(1/delta) / n`.
//
// # Safety
// `inputs` must be readable and `out` writable.
enum CalsegStatus calseg_ece_bound(const struct CalsegBoundInputs *inputs, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CALSEG_H */
