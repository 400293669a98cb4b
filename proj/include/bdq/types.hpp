#ifndef BDQ_TYPES_HPP_
#define BDQ_TYPES_HPP_

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace bdq {

// Dense double-precision carriers. Row-major matches the on-disk layout.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using ArrayXX = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

// Gaussian bulk at scale sigma with a fraction of entries at scale k*sigma.
struct OutlierProfile {
  double sigma = 1.0;
  double k = 1.0;
  double outlier_frac = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(sigma > 0.0))
      throw std::invalid_argument("OutlierProfile: sigma must be > 0");
    if (!(k >= 1.0))
      throw std::invalid_argument("OutlierProfile: k must be >= 1");
    if (!(outlier_frac >= 0.0 && outlier_frac < 1.0))
      throw std::invalid_argument("OutlierProfile: outlier_frac must be in [0,1)");
  }
};

// Measured residual statistics plus the analytic error decomposition.
// Measurement fills the first block; the predictors fill the second.
struct ErrorReport {
  double mean = 0.0;
  double empirical_mse = 0.0;
  double max_abs = 0.0;

  double predicted_normal = 0.0;
  double predicted_outlier = 0.0;
  double outlier_frac = 0.0;
  double total_predicted = 0.0;
  double dominance_ratio = 0.0;
};

inline void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite())
    throw std::invalid_argument(what + ": non-finite entries");
}

}  // namespace bdq

#endif  // BDQ_TYPES_HPP_
