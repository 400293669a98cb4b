#include "bdq/numerics.hpp"

#include <numeric>
#include <random>
#include <vector>

namespace bdq {

std::pair<Matrix, double> frobenius_normalize(const Matrix& w) {
  const double norm = w.norm();
  if (!(norm > 0.0))
    throw std::domain_error("frobenius_normalize: zero matrix");
  return {w / norm, norm};
}

Matrix sample_matrix(const OutlierProfile& profile, Index rows, Index cols) {
  profile.validate();
  if (rows < 1 || cols < 1)
    throw std::invalid_argument("sample_matrix: dims must be >= 1");

  std::mt19937_64 rng(profile.seed);
  std::normal_distribution<double> normal(0.0, profile.sigma);

  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = normal(rng);

  // Exact outlier count via a seeded partial shuffle of flat indices.
  const Index total = rows * cols;
  const Index count = static_cast<Index>(profile.outlier_frac * static_cast<double>(total));
  if (count > 0) {
    std::vector<Index> idx(static_cast<std::size_t>(total));
    std::iota(idx.begin(), idx.end(), Index{0});
    for (Index i = 0; i < count; ++i) {
      std::uniform_int_distribution<Index> pick(i, total - 1);
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    for (Index i = 0; i < count; ++i) {
      const Index flat = idx[static_cast<std::size_t>(i)];
      m(flat / cols, flat % cols) *= profile.k;
    }
  }
  return m;
}

}  // namespace bdq
