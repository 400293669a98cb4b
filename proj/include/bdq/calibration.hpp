#ifndef BDQ_CALIBRATION_HPP_
#define BDQ_CALIBRATION_HPP_

#include <string>
#include <vector>

#include "bdq/quantizer.hpp"
#include "bdq/transforms.hpp"
#include "bdq/types.hpp"

namespace bdq {

enum class Nonlinearity { none, relu };

struct ToyLayer {
  Matrix weight;
  Nonlinearity act = Nonlinearity::none;
};

// Linear chain with one transformation pair per layer. Output-side scales are
// compensated in the next layer's input transform (positive scales commute
// with relu), so with quantization off the pairs cancel exactly.
struct ToyNetwork {
  std::vector<ToyLayer> layers;
  std::vector<TransformPair> pairs;

  void validate() const;
  Index in_dim() const { return layers.front().weight.rows(); }
  Index out_dim() const { return layers.back().weight.cols(); }

  static ToyNetwork chain(const std::vector<Index>& dims,
                          const std::vector<Nonlinearity>& acts,
                          const OutlierProfile& weight_profile);
};

enum class CalibLoss { ce, rce };

CalibLoss parse_calib_loss(const std::string& s);
std::string to_string(CalibLoss l);

struct CalibrationConfig {
  double learning_rate = 5e-3;
  int epochs = 150;
  double delta = 0.5;
  int batch_size = 0;  // 0 = full batch
  std::uint64_t seed = 0;
  CalibLoss loss = CalibLoss::rce;
  int calib_set_size = 128;
  Granularity act_granularity = Granularity::per_row;
  bool learn_rotation = false;
  bool prediction_ema = false;  // blend a running student prediction into the loss
  double ema_decay = 0.9;

  void validate() const;
};

// -sum q_i ln p_i. Requires p > 0 on the support of q.
double cross_entropy(const Vector& q, const Vector& p);

// -sum_i (q_i ln p_i - p_i ln(delta p_i + (1-delta) q_i)). Natural log;
// not sign-definite. At delta = 1 equals cross_entropy(q,p) - entropy(p).
double rce_loss(const Vector& q, const Vector& p, double delta);

// Analytic d rce / d p.
Vector rce_gradient(const Vector& q, const Vector& p, double delta);

// Analytic d CE / d p = -q/p.
Vector ce_gradient(const Vector& q, const Vector& p);

Vector softmax(const Vector& logits);
Matrix softmax_rows(const Matrix& logits);

// d loss / d logits through the softmax.
Vector loss_logit_gradient(const Vector& q, const Vector& logits, double delta,
                           CalibLoss loss);

// Forward pass with the network's pairs applied. Null specs mean full
// precision on that operand.
Matrix network_forward(const ToyNetwork& net, const Matrix& x,
                       const QuantSpec* act_spec, const QuantSpec* weight_spec);

struct TraceRow {
  int epoch = 0;
  double train_loss = 0.0;
  double heldout_loss = 0.0;
  double mean_flatness = 0.0;
  double max_abs_weight = 0.0;
};

struct CalibrationResult {
  std::vector<TransformPair> pairs;
  std::vector<TraceRow> trace;
  bool diverged = false;
};

// Learns the log-diagonals (and optionally the Cayley parameters of each
// rotation) by plain gradient descent with cosine decay, aligning the
// quantized student's output distribution with the full-precision teacher's.
// Rounding uses the straight-through estimator. Weights are never updated.
CalibrationResult calibrate(const ToyNetwork& net, const Matrix& calib_inputs,
                            const Matrix& heldout_inputs, const QuantSpec& spec,
                            const CalibrationConfig& cfg);

void save_trace_csv(const std::vector<TraceRow>& trace, const std::string& path);

}  // namespace bdq

#endif  // BDQ_CALIBRATION_HPP_
