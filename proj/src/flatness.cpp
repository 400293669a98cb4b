#include "bdq/flatness.hpp"

#include <algorithm>
#include <vector>

#include "bdq/numerics.hpp"

namespace bdq {
namespace {

// Squared-entry energy matrix, normalized to total 1.
ArrayXX energy_of(const Matrix& w) {
  ArrayXX e = w.array().square();
  const double total = e.sum();
  if (!(total > 0.0)) throw std::domain_error("flatness: zero matrix");
  return e / total;
}

void check_no_zero_lines(const ArrayXX& e) {
  for (Index i = 0; i < e.rows(); ++i)
    if (!(e.row(i).sum() > 0.0))
      throw std::domain_error("flatness: all-zero row");
  for (Index j = 0; j < e.cols(); ++j)
    if (!(e.col(j).sum() > 0.0))
      throw std::domain_error("flatness: all-zero column");
}

// Normalized objective: q = e / (alpha beta), F = sum (q/S) ln (q/S).
double normalized_F(const ArrayXX& e, const Vector& alpha, const Vector& beta) {
  double s = 0.0;
  for (Index i = 0; i < e.rows(); ++i)
    for (Index j = 0; j < e.cols(); ++j) s += e(i, j) / (alpha[i] * beta[j]);
  double f = 0.0;
  for (Index i = 0; i < e.rows(); ++i)
    for (Index j = 0; j < e.cols(); ++j) {
      const double p = e(i, j) / (alpha[i] * beta[j]) / s;
      if (p > 0.0) f += p * std::log(p);
    }
  return f;
}

// Exact block minimizer over the row weights with beta fixed.
Vector row_update(const ArrayXX& e, const Vector& beta) {
  Vector alpha(e.rows());
  for (Index i = 0; i < e.rows(); ++i) {
    double u_sum = 0.0;
    for (Index j = 0; j < e.cols(); ++j) u_sum += e(i, j) / beta[j];
    double h = 0.0;
    for (Index j = 0; j < e.cols(); ++j) {
      const double pi = e(i, j) / beta[j] / u_sum;
      if (pi > 0.0) h -= pi * std::log(pi);
    }
    alpha[i] = u_sum * std::exp(-h);
  }
  return alpha;
}

struct RunResult {
  Vector alpha, beta;
  double F = 0.0;
  int iterations = 0;
  bool converged = false;
};

RunResult refine(const ArrayXX& e, Vector alpha, Vector beta, double tol, int max_iters) {
  const ArrayXX et = e.transpose();
  RunResult r;
  double f_prev = normalized_F(e, alpha, beta);
  for (int it = 0; it < max_iters; ++it) {
    alpha = row_update(e, beta);
    beta = row_update(et, alpha);
    const double f = normalized_F(e, alpha, beta);
    r.iterations = it + 1;
    if (std::abs(f_prev - f) < tol) {
      r.converged = true;
      f_prev = f;
      break;
    }
    f_prev = f;
  }
  r.alpha = std::move(alpha);
  r.beta = std::move(beta);
  r.F = f_prev;
  return r;
}

std::vector<std::pair<Vector, Vector>> initial_points(const ArrayXX& e) {
  const Index m = e.rows(), n = e.cols();
  std::vector<std::pair<Vector, Vector>> inits;

  // Energy-balancing start: row masses, then column masses of the residual.
  Vector alpha(m), beta = Vector::Ones(n);
  for (Index i = 0; i < m; ++i) alpha[i] = e.row(i).sum() * double(m);
  Vector beta2(n);
  for (Index j = 0; j < n; ++j) {
    double s = 0.0;
    for (Index i = 0; i < m; ++i) s += e(i, j) / alpha[i];
    beta2[j] = s * double(n);
  }
  inits.emplace_back(alpha, beta2);
  inits.emplace_back(Vector::Ones(m), Vector::Ones(n));

  // Coarse lattice over the log offsets for small problems; the objective can
  // have several basins and the block updates only descend within one.
  const int dims = int(m - 1 + n - 1);
  if (dims >= 1 && dims <= 6) {
    static constexpr int kPoints[7] = {0, 17, 17, 13, 9, 7, 5};
    const int pts = kPoints[dims];
    const double range = 18.0;
    std::vector<int> digit(static_cast<std::size_t>(dims), 0);
    std::vector<std::pair<double, std::vector<int>>> best;
    while (true) {
      Vector a = Vector::Ones(m), b = Vector::Ones(n);
      for (int d = 0; d < dims; ++d) {
        const double off = -range + 2.0 * range * digit[static_cast<std::size_t>(d)] / (pts - 1);
        if (d < m - 1)
          a[d + 1] = std::exp(off);
        else
          b[d - (m - 1) + 1] = std::exp(off);
      }
      const double f = normalized_F(e, a, b);
      best.emplace_back(f, digit);
      int d = 0;
      while (d < dims && ++digit[static_cast<std::size_t>(d)] == pts) {
        digit[static_cast<std::size_t>(d)] = 0;
        ++d;
      }
      if (d == dims) break;
    }
    std::partial_sort(best.begin(), best.begin() + std::min<std::size_t>(4, best.size()),
                      best.end());
    for (std::size_t t = 0; t < std::min<std::size_t>(4, best.size()); ++t) {
      Vector a = Vector::Ones(m), b = Vector::Ones(n);
      for (int d = 0; d < dims; ++d) {
        const double off =
            -range + 2.0 * range * best[t].second[static_cast<std::size_t>(d)] / (pts - 1);
        if (d < m - 1)
          a[d + 1] = std::exp(off);
        else
          b[d - (m - 1) + 1] = std::exp(off);
      }
      inits.emplace_back(a, b);
    }
  }
  return inits;
}

void check_positive(const FlatnessState& state) {
  if ((state.alpha.array() <= 0.0).any() || (state.beta.array() <= 0.0).any())
    throw std::domain_error("flatness: weights must be strictly positive");
}

}  // namespace

double flatness_value(const Matrix& w, const FlatnessState& state) {
  check_positive(state);
  if (w.rows() != state.alpha.size() || w.cols() != state.beta.size())
    throw std::invalid_argument("flatness_value: shape mismatch");
  double f = 0.0;
  for (Index i = 0; i < w.rows(); ++i)
    for (Index j = 0; j < w.cols(); ++j) {
      const double p = w(i, j) * w(i, j) / (state.alpha[i] * state.beta[j]);
      if (p > 0.0) f += p * std::log(p);
    }
  return f;
}

std::pair<double, double> constraint_residuals(const Matrix& w, const FlatnessState& state) {
  check_positive(state);
  double norm_sum = 0.0, energy_sum = 0.0;
  for (Index i = 0; i < w.rows(); ++i)
    for (Index j = 0; j < w.cols(); ++j) {
      const double sq = w(i, j) * w(i, j);
      norm_sum += sq / (state.alpha[i] * state.beta[j]);
      energy_sum += state.alpha[i] * sq * state.beta[j];
    }
  return {std::abs(norm_sum - 1.0), std::abs(energy_sum - state.C)};
}

double stationarity_residual(const Matrix& w, const FlatnessState& state,
                             double* lambda1, double* lambda2) {
  check_positive(state);
  const Index m = w.rows(), n = w.cols();
  // Each optimality condition is linear in the two multipliers:
  // a + lambda1 * b + lambda2 * c = 0, one row condition per row weight and
  // one column condition per column weight.
  Eigen::MatrixXd coeff(m + n, 2);
  Eigen::VectorXd rhs(m + n);
  for (Index k = 0; k < m; ++k) {
    double a = 0.0, b = 0.0, c = 0.0;
    for (Index j = 0; j < n; ++j) {
      const double sq = w(k, j) * w(k, j);
      if (sq > 0.0) {
        const double p = sq / (state.alpha[k] * state.beta[j]);
        a += p / state.alpha[k] * (std::log(p) + 1.0);
        b += p / state.alpha[k];
      }
      c += sq * state.beta[j];
    }
    coeff(k, 0) = b;
    coeff(k, 1) = c;
    rhs(k) = -a;
  }
  for (Index l = 0; l < n; ++l) {
    double a = 0.0, b = 0.0, c = 0.0;
    for (Index i = 0; i < m; ++i) {
      const double sq = w(i, l) * w(i, l);
      if (sq > 0.0) {
        const double p = sq / (state.alpha[i] * state.beta[l]);
        a += p / state.beta[l] * (std::log(p) + 1.0);
        b += p / state.beta[l];
      }
      c += sq * state.alpha[i];
    }
    coeff(m + l, 0) = b;
    coeff(m + l, 1) = c;
    rhs(m + l) = -a;
  }
  const Eigen::Vector2d fit =
      coeff.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(rhs);
  if (lambda1) *lambda1 = fit[0];
  if (lambda2) *lambda2 = fit[1];
  return (coeff * fit - rhs).cwiseAbs().maxCoeff();
}

FlatnessResult optimize_flatness(const Matrix& w, double tol, int max_iters) {
  require_finite(w, "optimize_flatness");
  const Matrix wn = frobenius_normalize(w).first;
  const ArrayXX e = energy_of(wn);
  check_no_zero_lines(e);

  RunResult best;
  best.F = std::numeric_limits<double>::infinity();
  for (auto& [a0, b0] : initial_points(e)) {
    RunResult r = refine(e, a0, b0, tol, max_iters);
    if (r.F < best.F) best = std::move(r);
  }

  Vector alpha = best.alpha, beta = best.beta;
  // Fix the scale so the energies sum to one, splitting the correction with a
  // geometric-mean-balanced gauge (the reciprocal direction is otherwise free).
  double s = 0.0;
  for (Index i = 0; i < e.rows(); ++i)
    for (Index j = 0; j < e.cols(); ++j) s += e(i, j) / (alpha[i] * beta[j]);
  const double ga = std::exp(alpha.array().log().mean());
  const double gb = std::exp(beta.array().log().mean());
  const double t = std::sqrt(gb / ga);
  alpha *= std::sqrt(s) * t;
  beta *= std::sqrt(s) / t;

  FlatnessResult result;
  result.state.alpha = alpha;
  result.state.beta = beta;
  result.state.C = 1.0;
  result.state.iterations = best.iterations;
  result.state.converged = best.converged;
  result.state.F = flatness_value(wn, result.state);
  auto [nr, er] = constraint_residuals(wn, result.state);
  result.state.norm_residual = nr;
  result.state.energy_residual = er;
  stationarity_residual(wn, result.state, &result.state.lambda1, &result.state.lambda2);
  result.transform.d1 = alpha.array().sqrt();
  result.transform.d2 = beta.array().sqrt();
  return result;
}

Matrix apply_bidiagonal(const Matrix& w, const BiDiagonalTransform& t,
                        BiDiagonalDirection direction) {
  if (w.rows() != t.d1.size() || w.cols() != t.d2.size())
    throw std::invalid_argument("apply_bidiagonal: shape mismatch");
  if ((t.d1.array() <= 0.0).any() || (t.d2.array() <= 0.0).any())
    throw std::invalid_argument("apply_bidiagonal: scales must be positive");
  Matrix out = w;
  if (direction == BiDiagonalDirection::flatten) {
    out.array().colwise() /= t.d1.array();
    out.array().rowwise() /= t.d2.transpose().array();
  } else {
    out.array().colwise() *= t.d1.array();
    out.array().rowwise() *= t.d2.transpose().array();
  }
  return out;
}

Vector flatness_row_update(const Matrix& w, const Vector& beta) {
  if (w.cols() != beta.size())
    throw std::invalid_argument("flatness_row_update: shape mismatch");
  if ((beta.array() <= 0.0).any())
    throw std::invalid_argument("flatness_row_update: beta must be positive");
  // Raw squared entries: each output depends only on its own row and beta.
  const ArrayXX e = w.array().square();
  for (Index i = 0; i < e.rows(); ++i)
    if (!(e.row(i).sum() > 0.0))
      throw std::domain_error("flatness_row_update: all-zero row");
  return row_update(e, beta);
}

}  // namespace bdq
