#include "bdq/quantizer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bdq/numerics.hpp"

namespace bdq {

QuantMode parse_quant_mode(const std::string& s) {
  if (s == "paper_max_abs") return QuantMode::paper_max_abs;
  if (s == "min_max_affine") return QuantMode::min_max_affine;
  if (s == "symmetric_signed") return QuantMode::symmetric_signed;
  throw std::invalid_argument("unknown quant mode: " + s);
}

std::string to_string(QuantMode m) {
  switch (m) {
    case QuantMode::paper_max_abs: return "paper_max_abs";
    case QuantMode::min_max_affine: return "min_max_affine";
    case QuantMode::symmetric_signed: return "symmetric_signed";
  }
  return "?";
}

Granularity parse_granularity(const std::string& s) {
  if (s == "per_tensor") return Granularity::per_tensor;
  if (s == "per_row") return Granularity::per_row;
  throw std::invalid_argument("unknown granularity: " + s);
}

std::string to_string(Granularity g) {
  return g == Granularity::per_tensor ? "per_tensor" : "per_row";
}

void QuantSpec::validate() const {
  if (bits < 2 || bits > 16)
    throw std::invalid_argument("QuantSpec: bits must be in [2,16]");
  if (clip && !(*clip > 0.0))
    throw std::invalid_argument("QuantSpec: clip must be > 0");
}

bool QuantizedTensor::any_degenerate() const {
  return std::any_of(degenerate.begin(), degenerate.end(),
                     [](std::uint8_t d) { return d != 0; });
}

namespace {

double round_half_away(double v) { return std::round(v); }

struct GroupParams {
  double scale;
  int zero_point;
  bool degenerate;
};

// Scale and zero point for one group of values (already clip-clamped).
GroupParams group_params(const double* v, Index n, const QuantSpec& spec) {
  double lo = 0.0, hi = 0.0, max_abs = 0.0;
  bool has_negative = false;
  for (Index i = 0; i < n; ++i) {
    lo = std::min(lo, v[i]);
    hi = std::max(hi, v[i]);
    max_abs = std::max(max_abs, std::abs(v[i]));
    has_negative |= v[i] < 0.0;
  }
  const int b = spec.bits;
  switch (spec.mode) {
    case QuantMode::paper_max_abs: {
      if (max_abs == 0.0) return {1.0, has_negative ? (1 << (b - 1)) : 0, true};
      return {max_abs / ((1 << b) - 1), has_negative ? (1 << (b - 1)) : 0, false};
    }
    case QuantMode::min_max_affine: {
      if (hi == lo) return {1.0, 0, true};
      const double scale = (hi - lo) / ((1 << b) - 1);
      const int z = static_cast<int>(std::clamp(
          round_half_away(-lo / scale), 0.0, double((1 << b) - 1)));
      return {scale, z, false};
    }
    case QuantMode::symmetric_signed: {
      if (max_abs == 0.0) return {1.0, 0, true};
      return {max_abs / ((1 << (b - 1)) - 1), 0, false};
    }
  }
  return {1.0, 0, true};
}

}  // namespace

QuantizedTensor quantize(const Matrix& w, const QuantSpec& spec) {
  spec.validate();
  require_finite(w, "quantize");
  if (w.size() == 0) throw std::invalid_argument("quantize: empty input");

  Matrix clamped = w;
  if (spec.clip) {
    const double c = *spec.clip;
    clamped = clamped.cwiseMax(-c).cwiseMin(c);
  }

  const Index ngroups = spec.granularity == Granularity::per_row ? w.rows() : 1;
  QuantizedTensor q;
  q.spec = spec;
  q.codes.resize(w.rows(), w.cols());
  q.scales.resize(ngroups);
  q.zero_points.resize(ngroups);
  q.degenerate.assign(static_cast<std::size_t>(ngroups), 0);

  const int cmin = spec.code_min();
  const int cmax = spec.code_max();
  for (Index g = 0; g < ngroups; ++g) {
    const Index r0 = spec.granularity == Granularity::per_row ? g : 0;
    const Index nrows = spec.granularity == Granularity::per_row ? 1 : w.rows();
    const auto block = clamped.block(r0, 0, nrows, w.cols());
    const GroupParams p = group_params(block.data(), block.size(), spec);
    q.scales[g] = p.scale;
    q.zero_points[g] = p.zero_point;
    q.degenerate[static_cast<std::size_t>(g)] = p.degenerate ? 1 : 0;
    for (Index i = 0; i < nrows; ++i)
      for (Index j = 0; j < w.cols(); ++j) {
        const double c = round_half_away(block(i, j) / p.scale) + p.zero_point;
        q.codes(r0 + i, j) = static_cast<std::int32_t>(
            std::clamp(c, double(cmin), double(cmax)));
      }
  }
  return q;
}

Matrix dequantize(const QuantizedTensor& q) {
  Matrix out(q.rows(), q.cols());
  const bool per_row = q.spec.granularity == Granularity::per_row;
  for (Index i = 0; i < q.rows(); ++i) {
    const Index g = per_row ? i : 0;
    const double scale = q.scales[g];
    const int z = q.zero_points[g];
    for (Index j = 0; j < q.cols(); ++j)
      out(i, j) = (q.codes(i, j) - z) * scale;
  }
  return out;
}

Matrix fake_quantize(const Matrix& w, const QuantSpec& spec) {
  return dequantize(quantize(w, spec));
}

BoolArray clipped_mask(const Matrix& w, const QuantizedTensor& q) {
  if (w.rows() != q.rows() || w.cols() != q.cols())
    throw std::invalid_argument("clipped_mask: shape mismatch");
  BoolArray mask(w.rows(), w.cols());
  const bool per_row = q.spec.granularity == Granularity::per_row;
  const double cmin = q.spec.code_min();
  const double cmax = q.spec.code_max();
  for (Index i = 0; i < w.rows(); ++i) {
    const Index g = per_row ? i : 0;
    const double scale = q.scales[g];
    const int z = q.zero_points[g];
    for (Index j = 0; j < w.cols(); ++j) {
      bool clipped = false;
      double v = w(i, j);
      if (q.spec.clip && std::abs(v) > *q.spec.clip) {
        clipped = true;
        v = std::clamp(v, -*q.spec.clip, *q.spec.clip);
      }
      const double c = std::round(v / scale) + z;
      clipped |= c < cmin || c > cmax;
      mask(i, j) = clipped;
    }
  }
  return mask;
}

ErrorReport quant_error(const Matrix& w, const QuantizedTensor& q, const Matrix& x) {
  if (w.rows() != q.rows() || w.cols() != q.cols())
    throw std::invalid_argument("quant_error: tensor shape mismatch");
  const Matrix residual_w = w - dequantize(q);
  Matrix residual;
  if (x.rows() == 1 && x.cols() == 1) {
    residual = residual_w * x(0, 0);
  } else {
    if (w.cols() != x.rows())
      throw std::invalid_argument("quant_error: W*x shapes not conformable");
    residual = residual_w * x;
  }
  ErrorReport r;
  r.mean = residual.mean();
  r.empirical_mse = residual.array().square().mean();
  r.max_abs = residual.array().abs().maxCoeff();
  return r;
}

BinOccupancy bin_occupancy(const QuantizedTensor& q) {
  if (q.codes.size() == 0) throw std::invalid_argument("bin_occupancy: empty codes");
  const int cmin = q.spec.code_min();
  const int levels = q.spec.levels();
  Vector hist = Vector::Zero(levels);
  for (Index i = 0; i < q.rows(); ++i)
    for (Index j = 0; j < q.cols(); ++j) hist[q.codes(i, j) - cmin] += 1.0;
  const double uniformity = shannon_entropy(hist) / std::log(double(levels));
  return {hist, uniformity};
}

namespace {

constexpr char kCodeMagic[4] = {'B', 'D', 'Q', 'I'};

std::string payload_path_for(const std::string& json_path) {
  std::string base = json_path;
  const auto pos = base.rfind(".json");
  if (pos != std::string::npos && pos == base.size() - 5) base.erase(pos);
  return base + ".bdqi";
}

}  // namespace

void save_quantized(const QuantizedTensor& q, const std::string& json_path) {
  const std::string payload = payload_path_for(json_path);

  std::string bytes;
  bytes.append(kCodeMagic, 4);
  auto put_u32 = [&bytes](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put_u32(static_cast<std::uint32_t>(q.rows()));
  put_u32(static_cast<std::uint32_t>(q.cols()));
  for (Index i = 0; i < q.rows(); ++i)
    for (Index j = 0; j < q.cols(); ++j)
      put_u32(static_cast<std::uint32_t>(std::bit_cast<std::uint32_t>(q.codes(i, j))));
  std::ofstream pf(payload, std::ios::binary | std::ios::trunc);
  if (!pf) throw std::runtime_error("cannot write " + payload);
  pf.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));

  nlohmann::json j;
  j["spec"] = {{"bits", q.spec.bits},
               {"mode", to_string(q.spec.mode)},
               {"granularity", to_string(q.spec.granularity)}};
  if (q.spec.clip) j["spec"]["clip"] = *q.spec.clip;
  j["shape"] = {q.rows(), q.cols()};
  j["scales"] = std::vector<double>(q.scales.data(), q.scales.data() + q.scales.size());
  j["zero_points"] = std::vector<int>(q.zero_points.data(),
                                      q.zero_points.data() + q.zero_points.size());
  j["degenerate"] = q.degenerate;
  {
    auto slash = payload.rfind('/');
    j["payload"] = slash == std::string::npos ? payload : payload.substr(slash + 1);
  }
  std::ofstream jf(json_path, std::ios::trunc);
  if (!jf) throw std::runtime_error("cannot write " + json_path);
  jf << j.dump(2) << '\n';
}

QuantizedTensor load_quantized(const std::string& json_path) {
  std::ifstream jf(json_path);
  if (!jf) throw std::runtime_error("cannot open " + json_path);
  nlohmann::json j;
  jf >> j;

  QuantizedTensor q;
  q.spec.bits = j["spec"]["bits"].get<int>();
  q.spec.mode = parse_quant_mode(j["spec"]["mode"].get<std::string>());
  q.spec.granularity = parse_granularity(j["spec"]["granularity"].get<std::string>());
  if (j["spec"].contains("clip")) q.spec.clip = j["spec"]["clip"].get<double>();

  const auto scales = j["scales"].get<std::vector<double>>();
  q.scales = Eigen::Map<const Vector>(scales.data(), static_cast<Index>(scales.size()));
  const auto zps = j["zero_points"].get<std::vector<int>>();
  q.zero_points = Eigen::Map<const Eigen::VectorXi>(zps.data(), static_cast<Index>(zps.size()));
  q.degenerate = j["degenerate"].get<std::vector<std::uint8_t>>();

  std::string payload = j["payload"].get<std::string>();
  if (payload.find('/') == std::string::npos) {
    const auto slash = json_path.rfind('/');
    if (slash != std::string::npos) payload = json_path.substr(0, slash + 1) + payload;
  }
  std::ifstream pf(payload, std::ios::binary);
  if (!pf) throw std::runtime_error("cannot open " + payload);
  std::ostringstream ss;
  ss << pf.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCodeMagic, 4) != 0)
    throw std::runtime_error(payload + ": not a BDQI file");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  auto get_u32 = [](const unsigned char* b) {
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  };
  const std::uint32_t rows = get_u32(p + 4);
  const std::uint32_t cols = get_u32(p + 8);
  if (bytes.size() != 12 + static_cast<std::size_t>(rows) * cols * 4)
    throw std::runtime_error(payload + ": truncated BDQI payload");
  q.codes.resize(rows, cols);
  const unsigned char* c = p + 12;
  for (Index i = 0; i < q.rows(); ++i)
    for (Index j2 = 0; j2 < q.cols(); ++j2, c += 4)
      q.codes(i, j2) = std::bit_cast<std::int32_t>(get_u32(c));

  const auto shape = j["shape"].get<std::vector<Index>>();
  if (shape.size() != 2 || shape[0] != q.rows() || shape[1] != q.cols())
    throw std::runtime_error(json_path + ": header/payload shape mismatch");
  return q;
}

}  // namespace bdq
