#ifndef BDQ_TRANSFORMS_HPP_
#define BDQ_TRANSFORMS_HPP_

#include <utility>
#include <vector>

#include "bdq/flatness.hpp"
#include "bdq/quantizer.hpp"
#include "bdq/types.hpp"

namespace bdq {

// Equivalent transformation pair around a linear map: input-channel scales,
// output-channel scales, and an orthogonal rotation over the input channels.
struct TransformPair {
  Vector lambda1;  // over the contracted (input) dimension
  Vector lambda2;  // over the output dimension
  Matrix R;        // orthogonal, over the contracted dimension

  static TransformPair identity(Index in_dim, Index out_dim);
  void validate(Index in_dim, Index out_dim) const;
};

// Sylvester construction scaled to orthonormal columns. n must be a power of 2.
Matrix hadamard(Index n);

// (I - S)(I + S)^{-1} for skew-symmetric S; always orthogonal.
Matrix cayley_orthogonal(const Matrix& skew);

// Hadamard times a seeded Cayley factor (Hadamard skipped when n is not a
// power of two or with_hadamard is false).
Matrix random_rotation(Index n, std::uint64_t seed, bool with_hadamard = true);

double orthogonality_defect(const Matrix& r);  // max |R^T R - I|

// y = Q(x L1 R) * Q(R^T L1^{-1} W L2^{-1}) * L2. With spec null both Q are
// identity and the result equals x*W exactly.
Matrix apply_pair_forward(const Matrix& x, const Matrix& w, const TransformPair& pair,
                          const QuantSpec* spec = nullptr);

// Kronecker-structured linear map P1 (x) P2 applied without materializing it.
struct KroneckerTransform {
  Matrix P1;  // r x r
  Matrix P2;  // s x s
  Index dim() const { return P1.rows() * P2.rows(); }
};

enum class KronSide { left, right };

Matrix kronecker_apply(const Matrix& w, const KroneckerTransform& kt, KronSide side);

struct RankReport {
  Index rank_before = 0;
  Index rank_after = 0;
  bool preserved = false;
};

Index numerical_rank(const Matrix& m);
RankReport rank_preservation_check(const Matrix& w, const BiDiagonalTransform& t);
RankReport rank_preservation_check(const Matrix& w, const KroneckerTransform& kt,
                                   KronSide side = KronSide::left);

// Gram similarity under right-rotation: eigenvalues and Frobenius norm are
// preserved; the energy-distribution entropy before/after is reported.
struct GramReport {
  double fro_before = 0.0;
  double fro_after = 0.0;
  double max_eigen_diff = 0.0;
  double max_offdiag_after = 0.0;
  double energy_entropy_before = 0.0;
  double energy_entropy_after = 0.0;
};

GramReport gram_spectrum_check(const Matrix& v1, const Matrix& r);

// Places `count` outliers of the given magnitude at seeded positions in
// distinct rows and columns; returns the positions.
std::vector<std::pair<Index, Index>> plant_outliers(Matrix& w, int count,
                                                    double magnitude,
                                                    std::uint64_t seed);

// Closed-form per-outlier suppression: d1_i = d2_j = sqrt(|W_ij|) at each
// outlier (flatten divides, so the adjusted magnitude is exactly 1).
BiDiagonalTransform diagonal_suppression(const Matrix& w,
                                         const std::vector<std::pair<Index, Index>>& outliers);

// Residual outlier energy sum_S V_ij^2 of the flattened matrix.
double outlier_energy(const Matrix& v, const std::vector<std::pair<Index, Index>>& outliers);

// Equal-parameter-budget comparison: the closed-form diagonal pair against a
// Kronecker-structured elementwise field fitted by plain gradient descent on
// the suppression loss (outlier energy plus off-outlier preservation).
struct SuppressionComparison {
  double diagonal_residual = 0.0;
  double kron_residual = 0.0;
  double kron_loss = 0.0;
  int outlier_count = 0;
  int diagonal_params = 0;
  int kron_params = 0;
};

SuppressionComparison budget_comparison(const Matrix& w,
                                        const std::vector<std::pair<Index, Index>>& outliers,
                                        Index r, Index s, double step = 1e-2,
                                        int iters = 2000);

}  // namespace bdq

#endif  // BDQ_TRANSFORMS_HPP_
