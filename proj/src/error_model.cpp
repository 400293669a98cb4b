#include "bdq/error_model.hpp"

#include <cmath>

#include "bdq/numerics.hpp"

namespace bdq {
namespace {

void check_bits(int bits) {
  if (bits < 2 || bits > 16)
    throw std::invalid_argument("bits must be in [2,16]");
}

double levels_minus_one(int bits) { return double((1 << bits) - 1); }

}  // namespace

double scale_from_range(double c, int bits) {
  check_bits(bits);
  if (!(c > 0.0)) throw std::invalid_argument("scale_from_range: c must be > 0");
  return c / levels_minus_one(bits);
}

double scale_from_outlier(double w_outlier, int bits) {
  check_bits(bits);
  if (w_outlier == 0.0)
    throw std::invalid_argument("scale_from_outlier: zero outlier");
  return std::abs(w_outlier) / levels_minus_one(bits);
}

OutlierBound single_outlier_bound(double w_outlier, int bits, double x) {
  check_bits(bits);
  if (x < 0.0) throw std::invalid_argument("single_outlier_bound: x must be >= 0");
  const double b = std::abs(w_outlier) * x / levels_minus_one(bits);
  return {b, b / 2.0};
}

double normal_term_variance(double k, double sigma, int bits) {
  check_bits(bits);
  if (!(k > 0.0 && sigma > 0.0))
    throw std::invalid_argument("normal_term_variance: k, sigma must be > 0");
  const double lm1 = levels_minus_one(bits);
  return k * k * sigma * sigma / (12.0 * lm1 * lm1);
}

double outlier_clip_error(double w_outlier, double step_prime, int bits) {
  check_bits(bits);
  if (!(step_prime > 0.0))
    throw std::invalid_argument("outlier_clip_error: step must be > 0");
  const double boundary = levels_minus_one(bits) * step_prime;
  const double a = std::abs(w_outlier);
  if (a <= boundary) return 0.0;
  const double d = a - boundary;
  return d * d;
}

ErrorReport total_error_decomposition(const OutlierProfile& profile, int bits,
                                      double x, double step_prime) {
  profile.validate();
  check_bits(bits);
  if (!(step_prime > 0.0))
    throw std::invalid_argument("total_error_decomposition: step must be > 0");
  ErrorReport r;
  r.outlier_frac = profile.outlier_frac;
  r.predicted_normal = step_prime * step_prime / 12.0;
  r.predicted_outlier = outlier_clip_error(profile.k * profile.sigma, step_prime, bits);
  const double p = profile.outlier_frac;
  r.total_predicted = (1.0 - p) * r.predicted_normal * x + p * r.predicted_outlier * x;
  r.dominance_ratio =
      r.total_predicted > 0.0 ? p * r.predicted_outlier * x / r.total_predicted : 0.0;
  return r;
}

double dominance_approx(double p, double w_outlier, double x) {
  if (!(p > 0.0 && p < 1.0))
    throw std::invalid_argument("dominance_approx: p must be in (0,1)");
  if (x < 0.0) throw std::invalid_argument("dominance_approx: x must be >= 0");
  return p * w_outlier * w_outlier * x;
}

ErrorReport monte_carlo_error_check(const OutlierProfile& profile, int bits,
                                    double x, double c_clip, Index samples) {
  if (!(c_clip > 0.0))
    throw std::invalid_argument("monte_carlo_error_check: c_clip must be > 0");
  const double step = scale_from_range(c_clip, bits);
  ErrorReport r = total_error_decomposition(profile, bits, x, step);

  const Index cols = 1024;
  const Index rows = (samples + cols - 1) / cols;
  const Matrix w = sample_matrix(profile, rows, cols);
  double sum = 0.0, sum_sq = 0.0, max_abs = 0.0;
  for (Index i = 0; i < w.size(); ++i) {
    const double v = w.data()[i];
    const double clamped = std::clamp(v, -c_clip, c_clip);
    const double rounded = step * std::round(clamped / step);
    const double err = (v - rounded) * x;
    sum += err;
    sum_sq += err * err;
    max_abs = std::max(max_abs, std::abs(err));
  }
  const double n = double(w.size());
  r.mean = sum / n;
  r.empirical_mse = sum_sq / n;
  r.max_abs = max_abs;
  return r;
}

RoundingCheck gaussian_rounding_check(int bits, Index samples, std::uint64_t seed) {
  check_bits(bits);
  OutlierProfile profile;
  profile.seed = seed;
  const Index cols = 1024;
  const Index rows = (samples + cols - 1) / cols;
  const Matrix w = sample_matrix(profile, rows, cols);
  const double c = w.array().abs().maxCoeff();
  const double step = scale_from_range(c, bits);
  double sum_sq = 0.0;
  for (Index i = 0; i < w.size(); ++i) {
    const double v = w.data()[i];
    const double err = v - step * std::round(v / step);
    sum_sq += err * err;
  }
  const double mse = sum_sq / double(w.size());
  return {step, mse, mse / (step * step / 12.0)};
}

}  // namespace bdq
