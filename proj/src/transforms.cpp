#include "bdq/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/SVD>

#include "bdq/numerics.hpp"

namespace bdq {

TransformPair TransformPair::identity(Index in_dim, Index out_dim) {
  return {Vector::Ones(in_dim), Vector::Ones(out_dim),
          Matrix::Identity(in_dim, in_dim)};
}

void TransformPair::validate(Index in_dim, Index out_dim) const {
  if (lambda1.size() != in_dim || lambda2.size() != out_dim ||
      R.rows() != in_dim || R.cols() != in_dim)
    throw std::invalid_argument("TransformPair: dimension mismatch");
  if ((lambda1.array() <= 0.0).any() || (lambda2.array() <= 0.0).any())
    throw std::invalid_argument("TransformPair: diagonals must be positive");
  if (orthogonality_defect(R) > 1e-10)
    throw std::invalid_argument("TransformPair: R is not orthogonal");
}

Matrix hadamard(Index n) {
  if (n < 1 || (n & (n - 1)) != 0)
    throw std::invalid_argument("hadamard: n must be a power of two");
  Matrix h(1, 1);
  h(0, 0) = 1.0;
  for (Index k = 1; k < n; k *= 2) {
    Matrix next(2 * k, 2 * k);
    next.topLeftCorner(k, k) = h;
    next.topRightCorner(k, k) = h;
    next.bottomLeftCorner(k, k) = h;
    next.bottomRightCorner(k, k) = -h;
    h = std::move(next);
  }
  return h / std::sqrt(double(n));
}

Matrix cayley_orthogonal(const Matrix& skew) {
  if (skew.rows() != skew.cols())
    throw std::invalid_argument("cayley_orthogonal: square matrix required");
  if ((skew + skew.transpose()).array().abs().maxCoeff() > 1e-12)
    throw std::invalid_argument("cayley_orthogonal: input is not skew-symmetric");
  const Index n = skew.rows();
  const Matrix id = Matrix::Identity(n, n);
  // I + S is always invertible for real skew-symmetric S, and (I - S)
  // commutes with (I + S)^{-1}.
  return (id + skew).partialPivLu().solve(id - skew);
}

Matrix random_rotation(Index n, std::uint64_t seed, bool with_hadamard) {
  if (n < 1) throw std::invalid_argument("random_rotation: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix a(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) a(i, j) = normal(rng) / std::sqrt(double(n));
  const Matrix skew = (a - Matrix(a.transpose())) / 2.0;
  const Matrix c = cayley_orthogonal(skew);
  const bool pow2 = n >= 1 && (n & (n - 1)) == 0;
  if (with_hadamard && pow2) return hadamard(n) * c;
  return c;
}

double orthogonality_defect(const Matrix& r) {
  return (Matrix(r.transpose() * r) - Matrix::Identity(r.cols(), r.cols()))
      .array()
      .abs()
      .maxCoeff();
}

namespace {

Matrix scale_cols(const Matrix& m, const Vector& s) {
  Matrix out = m;
  out.array().rowwise() *= s.transpose().array();
  return out;
}

Matrix scale_rows(const Matrix& m, const Vector& s) {
  Matrix out = m;
  out.array().colwise() *= s.array();
  return out;
}

}  // namespace

Matrix apply_pair_forward(const Matrix& x, const Matrix& w, const TransformPair& pair,
                          const QuantSpec* spec) {
  if (x.cols() != w.rows())
    throw std::invalid_argument("apply_pair_forward: x*W shapes not conformable");
  pair.validate(w.rows(), w.cols());

  Matrix xt = scale_cols(x, pair.lambda1) * pair.R;
  Matrix wt = pair.R.transpose() *
              scale_cols(scale_rows(w, pair.lambda1.cwiseInverse()),
                         pair.lambda2.cwiseInverse());
  if (spec) {
    xt = fake_quantize(xt, *spec);
    wt = fake_quantize(wt, *spec);
  }
  return scale_cols(xt * wt, pair.lambda2);
}

Matrix kronecker_apply(const Matrix& w, const KroneckerTransform& kt, KronSide side) {
  const Index r = kt.P1.rows(), s = kt.P2.rows();
  if (kt.P1.cols() != r || kt.P2.cols() != s)
    throw std::invalid_argument("kronecker_apply: factors must be square");
  const Index dim = r * s;
  Matrix out(w.rows(), w.cols());
  if (side == KronSide::left) {
    if (w.rows() != dim)
      throw std::invalid_argument("kronecker_apply: row count != r*s");
    // (P1 (x) P2) v = vec(P1 V P2^T) with V the r x s row-major reshape of v.
    for (Index c = 0; c < w.cols(); ++c) {
      const Vector vc = w.col(c);
      const Eigen::Map<const Matrix> v(vc.data(), r, s);
      const Matrix transformed = kt.P1 * Matrix(v) * kt.P2.transpose();
      for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < s; ++j) out(i * s + j, c) = transformed(i, j);
    }
  } else {
    if (w.cols() != dim)
      throw std::invalid_argument("kronecker_apply: column count != r*s");
    for (Index rw = 0; rw < w.rows(); ++rw) {
      const Vector vr = w.row(rw);
      const Eigen::Map<const Matrix> v(vr.data(), r, s);
      const Matrix transformed = kt.P1.transpose() * Matrix(v) * kt.P2;
      for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < s; ++j) out(rw, i * s + j) = transformed(i, j);
    }
  }
  return out;
}

Index numerical_rank(const Matrix& m) {
  if (m.size() == 0) return 0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv[0] == 0.0) return 0;
  const double tol = double(std::max(m.rows(), m.cols())) *
                     std::numeric_limits<double>::epsilon() * sv[0];
  Index rank = 0;
  for (Index i = 0; i < sv.size(); ++i)
    if (sv[i] > tol) ++rank;
  return rank;
}

RankReport rank_preservation_check(const Matrix& w, const BiDiagonalTransform& t) {
  RankReport r;
  r.rank_before = numerical_rank(w);
  r.rank_after = numerical_rank(apply_bidiagonal(w, t, BiDiagonalDirection::flatten));
  r.preserved = r.rank_before == r.rank_after;
  return r;
}

RankReport rank_preservation_check(const Matrix& w, const KroneckerTransform& kt,
                                   KronSide side) {
  RankReport r;
  r.rank_before = numerical_rank(w);
  r.rank_after = numerical_rank(kronecker_apply(w, kt, side));
  r.preserved = r.rank_before == r.rank_after;
  return r;
}

GramReport gram_spectrum_check(const Matrix& v1, const Matrix& r) {
  if (v1.cols() != r.rows())
    throw std::invalid_argument("gram_spectrum_check: shape mismatch");
  if (orthogonality_defect(r) > 1e-8)
    throw std::invalid_argument("gram_spectrum_check: R is not orthogonal");
  const Matrix v2 = v1 * r;
  const Eigen::MatrixXd g1 = Eigen::MatrixXd(v1.transpose() * v1);
  const Eigen::MatrixXd g2 = Eigen::MatrixXd(v2.transpose() * v2);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(g1), es2(g2);
  GramReport rep;
  rep.fro_before = v1.norm();
  rep.fro_after = v2.norm();
  rep.max_eigen_diff =
      (es1.eigenvalues() - es2.eigenvalues()).cwiseAbs().maxCoeff();
  double off = 0.0;
  for (Index i = 0; i < g2.rows(); ++i)
    for (Index j = 0; j < g2.cols(); ++j)
      if (i != j) off = std::max(off, std::abs(g2(i, j)));
  rep.max_offdiag_after = off;
  rep.energy_entropy_before = shannon_entropy(v1.reshaped().array().square());
  rep.energy_entropy_after = shannon_entropy(v2.reshaped().array().square());
  return rep;
}

std::vector<std::pair<Index, Index>> plant_outliers(Matrix& w, int count,
                                                    double magnitude,
                                                    std::uint64_t seed) {
  if (count < 0 || count > std::min(w.rows(), w.cols()))
    throw std::invalid_argument(
        "plant_outliers: count exceeds distinct rows/columns available");
  std::mt19937_64 rng(seed);
  std::vector<Index> rows(static_cast<std::size_t>(w.rows()));
  std::vector<Index> cols(static_cast<std::size_t>(w.cols()));
  std::iota(rows.begin(), rows.end(), Index{0});
  std::iota(cols.begin(), cols.end(), Index{0});
  std::shuffle(rows.begin(), rows.end(), rng);
  std::shuffle(cols.begin(), cols.end(), rng);
  std::uniform_int_distribution<int> coin(0, 1);
  std::vector<std::pair<Index, Index>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const Index i = rows[static_cast<std::size_t>(k)];
    const Index j = cols[static_cast<std::size_t>(k)];
    w(i, j) = coin(rng) ? magnitude : -magnitude;
    out.emplace_back(i, j);
  }
  return out;
}

BiDiagonalTransform diagonal_suppression(
    const Matrix& w, const std::vector<std::pair<Index, Index>>& outliers) {
  BiDiagonalTransform t{Vector::Ones(w.rows()), Vector::Ones(w.cols())};
  std::set<Index> used_rows, used_cols;
  for (const auto& [i, j] : outliers) {
    if (!used_rows.insert(i).second || !used_cols.insert(j).second)
      throw std::invalid_argument(
          "diagonal_suppression: outliers must occupy distinct rows/columns");
    const double a = std::abs(w(i, j));
    if (!(a > 0.0))
      throw std::invalid_argument("diagonal_suppression: zero outlier");
    const double d = std::sqrt(a);
    t.d1[i] = d;
    t.d2[j] = d;
  }
  return t;
}

double outlier_energy(const Matrix& v,
                      const std::vector<std::pair<Index, Index>>& outliers) {
  double sum = 0.0;
  for (const auto& [i, j] : outliers) sum += v(i, j) * v(i, j);
  return sum;
}

SuppressionComparison budget_comparison(
    const Matrix& w, const std::vector<std::pair<Index, Index>>& outliers,
    Index r, Index s, double step, int iters) {
  if (w.rows() != r * s || w.cols() != r * s)
    throw std::invalid_argument("budget_comparison: matrix must be (r*s) x (r*s)");

  SuppressionComparison cmp;
  cmp.outlier_count = static_cast<int>(outliers.size());
  cmp.diagonal_params = static_cast<int>(w.rows() + w.cols());
  cmp.kron_params = static_cast<int>(r * r + s * s);

  const BiDiagonalTransform diag = diagonal_suppression(w, outliers);
  cmp.diagonal_residual =
      outlier_energy(apply_bidiagonal(w, diag, BiDiagonalDirection::flatten), outliers);

  // Kronecker-structured elementwise field M = P1 (x) P2, fitted by plain
  // gradient descent on outlier energy plus off-outlier preservation, both in
  // units of the total matrix energy. All-ones factors give the no-op field.
  ArrayXX w2 = w.array().square();
  const double norm = w2.sum();
  ArrayXX target = ArrayXX::Ones(w.rows(), w.cols());
  for (const auto& [i, j] : outliers) target(i, j) = 0.0;

  Matrix p1 = Matrix::Ones(r, r), p2 = Matrix::Ones(s, s);
  auto field_at = [&](Index i, Index j) {
    return p1(i / s, j / s) * p2(i % s, j % s);
  };
  for (int it = 0; it < iters; ++it) {
    Matrix g1 = Matrix::Zero(r, r), g2 = Matrix::Zero(s, s);
    for (Index i = 0; i < w.rows(); ++i)
      for (Index j = 0; j < w.cols(); ++j) {
        const double g = 2.0 * w2(i, j) * (field_at(i, j) - target(i, j)) / norm;
        g1(i / s, j / s) += g * p2(i % s, j % s);
        g2(i % s, j % s) += g * p1(i / s, j / s);
      }
    p1 -= step * g1;
    p2 -= step * g2;
  }

  double resid = 0.0, loss = 0.0;
  for (Index i = 0; i < w.rows(); ++i)
    for (Index j = 0; j < w.cols(); ++j) {
      const double m = field_at(i, j);
      loss += w2(i, j) * (m - target(i, j)) * (m - target(i, j)) / norm;
    }
  for (const auto& [i, j] : outliers) {
    const double v = field_at(i, j) * w(i, j);
    resid += v * v;
  }
  cmp.kron_residual = resid;
  cmp.kron_loss = loss;
  return cmp;
}

}  // namespace bdq
