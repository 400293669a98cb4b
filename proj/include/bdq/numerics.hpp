#ifndef BDQ_NUMERICS_HPP_
#define BDQ_NUMERICS_HPP_

#include <cmath>
#include <stdexcept>
#include <utility>

#include "bdq/types.hpp"

namespace bdq {

// Entropy in nats of the distribution obtained by normalizing `weights`.
// Zero entries contribute nothing (0 ln 0 := 0).
template <typename Derived>
double shannon_entropy(const Eigen::DenseBase<Derived>& weights) {
  double sum = 0.0;
  for (Index i = 0; i < weights.size(); ++i) {
    const double w = weights.derived().coeff(i);
    if (w < 0.0)
      throw std::domain_error("shannon_entropy: negative weight");
    sum += w;
  }
  if (!(sum > 0.0))
    throw std::domain_error("shannon_entropy: weights sum to zero");
  double h = 0.0;
  for (Index i = 0; i < weights.size(); ++i) {
    const double p = weights.derived().coeff(i) / sum;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

// Returns (W / ||W||_F, ||W||_F).
std::pair<Matrix, double> frobenius_normalize(const Matrix& w);

// Entries i.i.d. N(0, sigma^2) except floor(frac*rows*cols) positions chosen
// by a seeded shuffle, whose draws are scaled to N(0, (k*sigma)^2).
Matrix sample_matrix(const OutlierProfile& profile, Index rows, Index cols);

}  // namespace bdq

#endif  // BDQ_NUMERICS_HPP_
