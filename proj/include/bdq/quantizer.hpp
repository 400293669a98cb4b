#ifndef BDQ_QUANTIZER_HPP_
#define BDQ_QUANTIZER_HPP_

#include <optional>
#include <string>
#include <vector>

#include "bdq/types.hpp"

namespace bdq {

enum class QuantMode { paper_max_abs, min_max_affine, symmetric_signed };
enum class Granularity { per_tensor, per_row };

QuantMode parse_quant_mode(const std::string& s);
std::string to_string(QuantMode m);
Granularity parse_granularity(const std::string& s);
std::string to_string(Granularity g);

struct QuantSpec {
  int bits = 4;
  QuantMode mode = QuantMode::paper_max_abs;
  Granularity granularity = Granularity::per_tensor;
  std::optional<double> clip;  // clamp to [-clip, clip] before the scale is chosen

  void validate() const;
  int code_min() const {
    return mode == QuantMode::symmetric_signed ? -(1 << (bits - 1)) : 0;
  }
  int code_max() const {
    return mode == QuantMode::symmetric_signed ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
  }
  int levels() const { return code_max() - code_min() + 1; }
};

using CodeMatrix = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct QuantizedTensor {
  CodeMatrix codes;
  Vector scales;                    // one per group
  Eigen::VectorXi zero_points;      // one per group
  std::vector<std::uint8_t> degenerate;  // all-zero groups get scale 1, codes z
  QuantSpec spec;

  Index rows() const { return codes.rows(); }
  Index cols() const { return codes.cols(); }
  Index groups() const { return scales.size(); }
  bool any_degenerate() const;
};

QuantizedTensor quantize(const Matrix& w, const QuantSpec& spec);
Matrix dequantize(const QuantizedTensor& q);

// Convenience round trip: dequantize(quantize(w)).
Matrix fake_quantize(const Matrix& w, const QuantSpec& spec);

// True where the element was clipped: |w| beyond the clip threshold, or the
// rounded code fell outside the representable range.
BoolArray clipped_mask(const Matrix& w, const QuantizedTensor& q);

// Residual statistics of (W - dequantize(q)) * x. Pass a 1x1 x for the
// weight-space residual.
ErrorReport quant_error(const Matrix& w, const QuantizedTensor& q, const Matrix& x);

struct BinOccupancy {
  Vector histogram;    // one bin per representable code level
  double uniformity;   // entropy(histogram) / ln(levels)
};

BinOccupancy bin_occupancy(const QuantizedTensor& q);

// JSON header (spec, shape, scales, zero points) plus a BDQI code payload
// ("BDQI", u32 rows, u32 cols, i32 LE codes) stored next to the header.
void save_quantized(const QuantizedTensor& q, const std::string& json_path);
QuantizedTensor load_quantized(const std::string& json_path);

}  // namespace bdq

#endif  // BDQ_QUANTIZER_HPP_
