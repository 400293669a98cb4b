#ifndef BDQ_ERROR_MODEL_HPP_
#define BDQ_ERROR_MODEL_HPP_

#include "bdq/types.hpp"

namespace bdq {

// step = c / (2^b - 1) for a quantization range [-c, c].
double scale_from_range(double c, int bits);

// step' = |w_outlier| / (2^b - 1): the step after an outlier widens the range.
double scale_from_outlier(double w_outlier, int bits);

// Per-element error limit once an outlier sets the step. `paper_bound` is the
// literal |w_outlier| * x / (2^b - 1); `half_bound` is the step/2 convention.
struct OutlierBound {
  double paper_bound;
  double half_bound;
};
OutlierBound single_outlier_bound(double w_outlier, int bits, double x);

// Rounding-noise variance of the bulk once the step grows to k*sigma/(2^b-1):
// k^2 sigma^2 / (12 (2^b - 1)^2).
double normal_term_variance(double k, double sigma, int bits);

// Squared truncation error of an outlier clamped to the range boundary:
// (|w_outlier| - (2^b - 1) step')^2 when outside the range, else 0.
double outlier_clip_error(double w_outlier, double step_prime, int bits);

// Mixture decomposition: (1-p) * normal * x + p * clip * x, with the outlier
// magnitude taken at k*sigma. Fills only the predicted fields.
ErrorReport total_error_decomposition(const OutlierProfile& profile, int bits,
                                      double x, double step_prime);

// Dominant-outlier approximation p * w_outlier^2 * x.
double dominance_approx(double p, double w_outlier, double x);

// Monte-Carlo validator: samples the mixture, clamps at c_clip, rounds on the
// grid with step c_clip/(2^b - 1), and fills both the empirical and predicted
// sides of the report. Error expressions carry a single input factor x.
ErrorReport monte_carlo_error_check(const OutlierProfile& profile, int bits,
                                    double x, double c_clip, Index samples);

// Rounding-noise structure check: MSE of grid rounding N(0,1) data with step
// max|sample|/(2^b - 1), against the uniform-noise model step^2/12.
struct RoundingCheck {
  double step;
  double mse;
  double ratio;  // mse / (step^2 / 12)
};
RoundingCheck gaussian_rounding_check(int bits, Index samples, std::uint64_t seed);

}  // namespace bdq

#endif  // BDQ_ERROR_MODEL_HPP_
