#ifndef BDQ_FLATNESS_HPP_
#define BDQ_FLATNESS_HPP_

#include <cmath>

#include "bdq/types.hpp"

namespace bdq {

// Row/column energy weights for the dispersion objective
// F = sum_ij p_ij ln p_ij with p_ij = W_ij^2 / (alpha_i beta_j).
struct FlatnessState {
  Vector alpha;
  Vector beta;
  double F = 0.0;
  double C = 1.0;
  double norm_residual = 0.0;    // |sum_ij p_ij - 1|
  double energy_residual = 0.0;  // |sum_ij alpha_i W_ij^2 beta_j - C|
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Positive row scales d1 = sqrt(alpha) and column scales d2 = sqrt(beta).
// `flatten` divides: V_ij = W_ij / (d1_i d2_j), so V_ij^2 = p_ij * ||W||_F^2.
struct BiDiagonalTransform {
  Vector d1;
  Vector d2;
};

enum class BiDiagonalDirection { flatten, restore };

// Dispersion of the energy distribution at identity weights:
// sum_ij q ln q with q = W_ij^2 / ||W||_F^2. Lower is flatter;
// bounded below by -ln(rows*cols).
template <typename Derived>
double flatness_of(const Eigen::MatrixBase<Derived>& w) {
  double total = 0.0;
  for (Index i = 0; i < w.rows(); ++i)
    for (Index j = 0; j < w.cols(); ++j) {
      const double v = w.derived().coeff(i, j);
      total += v * v;
    }
  if (!(total > 0.0)) throw std::domain_error("flatness_of: zero matrix");
  double f = 0.0;
  for (Index i = 0; i < w.rows(); ++i)
    for (Index j = 0; j < w.cols(); ++j) {
      const double v = w.derived().coeff(i, j);
      const double q = v * v / total;
      if (q > 0.0) f += q * std::log(q);
    }
  return f;
}

// Literal sum_ij p_ij ln p_ij (0 ln 0 := 0). Expects W Frobenius-normalized.
double flatness_value(const Matrix& w, const FlatnessState& state);

// (norm_residual, energy_residual) against the state's C.
std::pair<double, double> constraint_residuals(const Matrix& w, const FlatnessState& state);

// Max absolute violation of the row/column optimality conditions, with the
// two multipliers fitted jointly by least squares. Optionally returns them.
double stationarity_residual(const Matrix& w, const FlatnessState& state,
                             double* lambda1 = nullptr, double* lambda2 = nullptr);

struct FlatnessResult {
  FlatnessState state;
  BiDiagonalTransform transform;
};

// Alternating exact row/column updates on the normalized objective, seeded
// from several deterministic starts (energy balancing, identity, and a coarse
// lattice for small problems). W is Frobenius-normalized internally.
FlatnessResult optimize_flatness(const Matrix& w, double tol = 1e-13,
                                 int max_iters = 500);

Matrix apply_bidiagonal(const Matrix& w, const BiDiagonalTransform& t,
                        BiDiagonalDirection direction);

// One exact block update: given column weights beta, the minimizing alpha_i is
// U_i * exp(-h_i) where U_i = sum_j W_ij^2/beta_j and h_i is the entropy of
// row i's conditional distribution. Depends only on row i and beta.
Vector flatness_row_update(const Matrix& w, const Vector& beta);

}  // namespace bdq

#endif  // BDQ_FLATNESS_HPP_
